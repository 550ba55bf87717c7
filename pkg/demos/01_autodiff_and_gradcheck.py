"""
Reverse-mode differentiation on a tape, checked by finite differences
=====================================================================

Every operation records itself on the active tape.  ``backward`` walks the
tape in reverse and sums vector-Jacobian products into each input.
"""

import numpy as np

from backlink import autodiff as ad
from backlink.autodiff import Tape, Tensor
from backlink.gradcheck import fd_gradient, relative_error

rng = np.random.default_rng(0)

# a tiny conv -> relu -> global average pool, then a fixed weighted sum
x = Tensor(rng.standard_normal((2, 3, 5, 5)))
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True, name="w")
c = rng.standard_normal((2, 4))


def forward() -> Tensor:
    return ad.mul_const(ad.global_avg_pool(ad.relu(ad.conv2d(x, w, padding=1))), c)


def value() -> float:
    return float(forward().data.sum())


with Tape() as tape:
    out = forward()
grads = ad.backward(tape, {out: np.ones_like(out.data)}, wrt=[w])

# central differences, one weight at a time
fd, skipped = fd_gradient(value, w)
print("analytic vs numeric relative error:", relative_error(grads[w], fd))
print("weights skipped near a relu kink:", int(skipped.sum()))
