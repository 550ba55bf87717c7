"""
How far errors travel between modules
=====================================

A network split into K modules trains each module on its own classifier.
With propagation length ``l`` the last ``l`` units of a module also receive
the next module's error, mixed with weight ``alpha`` (own) and ``1 - alpha``
(successor).  ``l = 0`` is purely greedy training.
"""

import numpy as np

from backlink.gradcheck import alpha_one_error, check_router_against_fd, full_span_monolithic_error, with_config
from backlink.layers import tiny_mlp
from backlink.router import BackLinkConfig, BackLinkNet, compute_gradients, inject_boundary_error, partition

# the weighting at one boundary, by hand
packet = inject_boundary_error(np.array([0.2, -0.2]), np.array([0.4, 0.0]), alpha=0.5, l=1)
print("combined boundary error:", packet.combined())

spec = tiny_mlp(dims=(6, 8, 8, 8, 8), num_classes=3)
rng = np.random.default_rng(1)
x = rng.standard_normal((8, 6))
y = rng.integers(0, 3, 8)

# gradient reaching the first unit of module 0 for growing l
for l in range(3):
    net = BackLinkNet(spec, partition(4, 2), BackLinkConfig(l, 0.5), seed=0)
    g, losses, _ = compute_gradients(net, x, y)
    first = net.backbone_parameters(0)[0]
    print(f"l={l}: |grad| of {first.name} = {np.linalg.norm(g[first]):.5f}, local losses {np.round(losses, 4)}")

# limit cases
net = BackLinkNet(spec, partition(4, 2), BackLinkConfig(2, 0.5), seed=0)
print("alpha=1 is greedy training, max difference:", alpha_one_error(net, x, y))
print("full span at alpha=0.5 equals joint backprop of 0.5 L1 + 0.5 L2, relative error:",
      full_span_monolithic_error(net, x, y))

# every module's gradient is the exact gradient of its own surrogate objective
reports = check_router_against_fd(with_config(net, l=1, alpha=0.25), x, y)
print("finite-difference check per module:", [f"{r.max_rel_error:.1e}" for r in reports])
