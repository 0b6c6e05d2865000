"""Small dense-math helpers and hand-differentiated layers.

Everything here works on float64 numpy arrays.  Layers return their output
together with a ``backward`` closure instead of caching state on the object,
so a layer can be evaluated several times per step without bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "normalize_quat",
    "quat_to_rotation",
    "quat_to_rotation_backward",
    "quat_multiply",
    "quat_from_axis_angle",
    "DiffLayer",
    "affine_forward_backward",
    "tanh_forward_backward",
    "grid_sample_trilinear",
]


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    return q


def normalize_quat(q) -> np.ndarray:
    """Return ``q / |q|`` along the last axis; zero-norm input raises ``ValueError``."""
    q = _as_quat(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(q)):
        raise ValueError("quaternion has non-finite components")
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero-norm quaternion")
    return q / norm


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of the normalized quaternion(s) ``q = (w, x, y, z)``.

    Accepts a single quaternion (4,) or a batch (..., 4) and returns
    (3, 3) or (..., 3, 3).
    """
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_to_rotation_backward(q, dR) -> np.ndarray:
    """Gradient w.r.t. the *unnormalized* quaternion given ``dL/dR``."""
    q = _as_quat(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = np.asarray(dR, dtype=np.float64)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2.0 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2.0 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2.0 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # project out the radial component of the normalization
    radial = np.sum(dqn * qn, axis=-1, keepdims=True)
    return (dqn - radial * qn) / norm


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation ``b`` first, then ``a``)."""
    a = _as_quat(a)
    b = _as_quat(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


Backward = Callable[[np.ndarray], tuple]


@dataclass
class DiffLayer:
    """Affine layer ``y = x @ W.T + b`` with weight (out, in) and bias (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not form an affine layer"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, zero: bool = False) -> "DiffLayer":
        if zero:
            return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim))

    def forward(self, x) -> tuple[np.ndarray, Backward]:
        return affine_forward_backward(self, x)


def affine_forward_backward(layer: DiffLayer, x) -> tuple[np.ndarray, Backward]:
    """Evaluate ``layer`` on a vector (in,) or a batch (B, in).

    The returned closure maps the upstream gradient dL/dy to
    ``(dW, db, dx)``; batch contributions to dW and db are summed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim or x.ndim not in (1, 2):
        raise ValueError(f"input shape {x.shape} does not match layer input dim {layer.in_dim}")
    W = layer.weight
    y = x @ W.T + layer.bias

    def backward(dy):
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != y.shape:
            raise ValueError(f"upstream gradient shape {dy.shape} != output shape {y.shape}")
        if x.ndim == 1:
            return np.outer(dy, x), dy.copy(), W.T @ dy
        return dy.T @ x, dy.sum(axis=0), dy @ W

    return y, backward


def tanh_forward_backward(x) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    y = np.tanh(x)

    def backward(dy):
        return dy * (1.0 - y * y)

    return y, backward


def grid_sample_trilinear(grid: np.ndarray, p) -> tuple[np.ndarray, Callable]:
    """Trilinearly sample a (R0, R1, R2, d) feature grid at grid-space points.

    ``p`` is (3,) or (N, 3) in index coordinates, i.e. ``p = (0, 0, 0)`` is the
    first cell and ``R - 1`` the last along each axis.  Points outside are
    clamped to the boundary and receive zero gradient along clamped axes.

    Returns ``(features, backward)`` where ``backward(d_features)`` gives
    ``(d_grid, d_p)``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    if pts.shape[-1] != 3:
        raise ValueError(f"sample points must be 3D, got shape {p.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    res = np.array(grid.shape[:3])
    if np.any(res < 2):
        raise ValueError("grid needs at least 2 cells per axis")
    upper = (res - 1).astype(np.float64)
    inside = (pts >= 0.0) & (pts <= upper)
    pc = np.clip(pts, 0.0, upper)
    i0 = np.minimum(np.floor(pc).astype(np.int64), res - 2)
    f = pc - i0
    g = 1.0 - f

    # corner order: bit 0 -> axis 2, bit 1 -> axis 1, bit 2 -> axis 0
    corners = []
    for c in range(8):
        o0, o1, o2 = (c >> 2) & 1, (c >> 1) & 1, c & 1
        w0 = f[:, 0] if o0 else g[:, 0]
        w1 = f[:, 1] if o1 else g[:, 1]
        w2 = f[:, 2] if o2 else g[:, 2]
        corners.append((o0, o1, o2, w0, w1, w2))

    feats = np.zeros((pts.shape[0], grid.shape[3]))
    for o0, o1, o2, w0, w1, w2 in corners:
        feats += (w0 * w1 * w2)[:, None] * grid[i0[:, 0] + o0, i0[:, 1] + o1, i0[:, 2] + o2]
    out = feats[0] if single else feats

    def backward(d_feats):
        d = np.atleast_2d(np.asarray(d_feats, dtype=np.float64))
        d_grid = np.zeros_like(grid)
        d_p = np.zeros_like(pts)
        flat = d_grid.reshape(-1, grid.shape[3])
        for o0, o1, o2, w0, w1, w2 in corners:
            idx = np.ravel_multi_index(
                (i0[:, 0] + o0, i0[:, 1] + o1, i0[:, 2] + o2), grid.shape[:3]
            )
            np.add.at(flat, idx, (w0 * w1 * w2)[:, None] * d)
            vals = np.einsum("nd,nd->n", d, grid[i0[:, 0] + o0, i0[:, 1] + o1, i0[:, 2] + o2])
            d_p[:, 0] += (1.0 if o0 else -1.0) * w1 * w2 * vals
            d_p[:, 1] += (1.0 if o1 else -1.0) * w0 * w2 * vals
            d_p[:, 2] += (1.0 if o2 else -1.0) * w0 * w1 * vals
        d_p *= inside
        return d_grid, (d_p[0] if single else d_p)

    return out, backward
