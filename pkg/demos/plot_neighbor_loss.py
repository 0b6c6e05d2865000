"""
The gated neighbor term
=======================

A point that jumps away from its neighbors for one frame is penalized;
a group that moves together is not.
"""

import numpy as np

from nc4dgs.losses import build_neighbor_graph, compute_gates, neighbor_loss

rng = np.random.default_rng(3)
points = rng.normal(scale=0.2, size=(60, 3))
graph = build_neighbor_graph(points, k=6)
tau = 0.05

# everyone translates together: offsets from the neighbor centers do not change
shifted = points + np.array([0.3, 0.0, 0.0])
print("rigid move:", neighbor_loss(graph, points, shifted, tau))

# small wobble below the threshold keeps every gate closed
wobble = points + rng.normal(scale=0.005, size=points.shape)
print("sub-threshold wobble:", neighbor_loss(graph, points, wobble, tau))

# one point and its neighbors jump; only edges between moving points count
jumped = points.copy()
jumped[graph.neighbors[0]] += np.array([0.0, 0.1, 0.0])
jumped[0] += np.array([0.0, 0.3, 0.0])
gates = compute_gates(graph, points, jumped, tau)
print("open edges:", int(gates.edge_gates.sum()), "of", gates.edge_gates.size)
print("gated loss:", neighbor_loss(graph, points, jumped, tau))
print("ungated loss:", neighbor_loss(graph, points, jumped, tau, gated=False))

# raising the threshold can only close gates
for t in (0.05, 0.15, 0.35):
    print(f"tau {t:.2f}: {neighbor_loss(graph, points, jumped, t):.5f}")
