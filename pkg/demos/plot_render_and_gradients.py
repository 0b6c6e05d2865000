"""
Rendering a Gaussian cloud and checking its gradients
=====================================================

Build a small random cloud, look at it from an orbit camera, and compare
the analytic backward pass against central differences for one parameter.
"""

import numpy as np

from nc4dgs.camera import CameraView, intrinsics_from_fov, look_at
from nc4dgs.gaussians import random_cloud
from nc4dgs.rasterizer import render, render_backward

rng = np.random.default_rng(0)
cloud = random_cloud(32, rng, extent=0.4)
camera = CameraView(intrinsics_from_fov(40.0, 48, 48), look_at((0.0, 0.3, 2.5), (0.0, 0.0, 0.0)), 48, 48)

# forward: colors plus the accumulated opacity per pixel
target = render(cloud, camera)
print("image", target.color.shape, "mean color", target.color.mean(axis=(0, 1)).round(3))
print("pixels with any coverage:", int(np.sum(target.alpha > 0.0)))

# backward of sum(w * image) for a random weight image
w = rng.normal(size=target.color.shape)
grads = render_backward(cloud, camera, target, w).as_dict()
for name, g in grads.items():
    print(f"{name:15s} grad norm {np.linalg.norm(g):.4f}")

# central difference on one coordinate of one position
i, axis, eps = 3, 0, 1e-4
cloud.positions[i, axis] += eps
up = np.sum(w * render(cloud, camera).color)
cloud.positions[i, axis] -= 2 * eps
down = np.sum(w * render(cloud, camera).color)
cloud.positions[i, axis] += eps
print("analytic", grads["positions"][i, axis], "numeric", (up - down) / (2 * eps))
