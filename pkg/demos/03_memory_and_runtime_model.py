"""
Memory and runtime trade-off of local training
==============================================

Stored activations shrink as the network is cut into more modules, while
duplicated units cost a little memory back.  A pipelined run keeps every
module busy; its speedup falls as communication gets more expensive.
"""

from backlink.costmodel import CostModel, estimate_memory, steady_state_speedup
from backlink.router import BackLinkConfig, partition

cost = CostModel.uniform(55, footprint=1.0, classifier=0.25)
bp = estimate_memory(cost, partition(55, 1), BackLinkConfig(), "BP").peak

print(" K  l   mode       memory/BP  speedup")
for K in (1, 2, 4, 8, 16):
    for l in ((0,) if K == 1 else (0, 1, 2, 4)):
        mode = "BP" if K == 1 else ("GLL" if l == 0 else "BackLink")
        peak = estimate_memory(cost, partition(55, K), BackLinkConfig(l, 0.5), mode).peak
        speed = 1.0 if K == 1 else steady_state_speedup(cost, partition(55, K), BackLinkConfig(l, 0.5))
        print(f"{K:2d}  {l}   {mode:<9}  {peak / bp:8.3f}  {speed:7.2f}")

# a balanced four-module pipeline under growing communication cost
small = CostModel.uniform(16)
for comm in (0.0, 0.1, 0.5, 1.0):
    s = steady_state_speedup(small.with_comm(comm), partition(16, 4), BackLinkConfig(1, 0.5))
    print(f"comm {comm:.1f} per element -> speedup {s:.2f}")
