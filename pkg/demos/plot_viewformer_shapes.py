"""
Token layouts for multi-view attention
======================================

Walk a five-view latent video through patchify, camera tokens and the
two attention layouts, then print the full shape ledger.
"""

import numpy as np

from nc4dgs.camera import CameraView, intrinsics_from_fov, look_at
from nc4dgs.viewformer import (
    DualAttentionWeights,
    LatentSpec,
    dual_attention_block,
    format_shape_ledger,
    plucker_embedding,
    rearrange_temporal,
    rearrange_view,
)

spec = LatentSpec(f=3, h=8, w=8, V=5, C=16)
print(format_shape_ledger(spec))

rng = np.random.default_rng(0)
x = rng.normal(size=(spec.V, spec.f + 1, spec.tokens_per_frame, spec.C))
print("per-view sequences", rearrange_temporal(x).shape)
print("per-frame sequences", rearrange_view(x).shape)

# one Plücker map per camera on a ring
cams = []
for v in range(spec.V):
    a = 2 * np.pi * v / spec.V
    eye = (2.5 * np.sin(a), 0.0, 2.5 * np.cos(a))
    cams.append(CameraView(intrinsics_from_fov(40.0, 64, 64), look_at(eye, (0.0, 0.0, 0.0)), 64, 64))
maps = np.stack([plucker_embedding(c) for c in cams])
print("Plücker maps", maps.shape, "direction norms", np.linalg.norm(maps[:, 3:], axis=1).mean().round(6))

# shuffling views shuffles the output the same way
w = DualAttentionWeights.init(spec.C, rng)
cam_tokens = rng.normal(size=(spec.V, spec.tokens_per_frame, spec.C))
out = dual_attention_block(x, cam_tokens, w)
perm = rng.permutation(spec.V)
diff = np.abs(dual_attention_block(x[perm], cam_tokens[perm], w) - out[perm]).max()
print("view permutation error", diff)
