"""Tiled software rasterizer for projected Gaussians with an analytic backward pass.

Per pixel, contributors are composited front to back in ascending camera
depth (ties broken by Gaussian index).  A contributor whose exponent falls
below ``EXPONENT_CUTOFF`` adds nothing, and compositing stops once the
transmittance drops under ``TRANSMITTANCE_EPS``.

Gaussians are binned into 16x16 tiles by the bounding box of the region
where their exponent stays above the cutoff, so skipping a Gaussian outside
a tile is exactly equivalent to evaluating it and finding a zero weight.
That makes the tiled path bit-identical to the naive one.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .camera import CameraView
from .gaussians import GaussianCloud, Projection, project_cloud, projection_backward

TILE_SIZE = 16
TRANSMITTANCE_EPS = 1e-4
EXPONENT_CUTOFF = -12.0

GRAD_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")


@numba.njit(cache=True, nogil=True)
def _forward_tiles(t_begin, t_end, tile_ptr, tile_ids, n_tiles_x, tile_w, tile_h, width, height,
                   mean2d, conic, opacity, color, background, out_color, out_alpha):
    for tile in range(t_begin, t_end):
        tx = tile % n_tiles_x
        ty = tile // n_tiles_x
        x0 = tx * tile_w
        y0 = ty * tile_h
        start = tile_ptr[tile]
        stop = tile_ptr[tile + 1]
        for py in range(y0, min(y0 + tile_h, height)):
            for px in range(x0, min(x0 + tile_w, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(start, stop):
                    if T < TRANSMITTANCE_EPS:
                        break
                    g = tile_ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    if power < EXPONENT_CUTOFF:
                        continue
                    alpha = opacity[g] * np.exp(power)
                    w = alpha * T
                    c0 += color[g, 0] * w
                    c1 += color[g, 1] * w
                    c2 += color[g, 2] * w
                    T = T * (1.0 - alpha)
                out_color[py, px, 0] = c0 + T * background[0]
                out_color[py, px, 1] = c1 + T * background[1]
                out_color[py, px, 2] = c2 + T * background[2]
                out_alpha[py, px] = 1.0 - T


@numba.njit(cache=True, nogil=True)
def _backward_tiles(t_begin, t_end, tile_ptr, tile_ids, n_tiles_x, tile_w, tile_h, width, height,
                    mean2d, conic, opacity, color, background, d_image, pair_grads):
    # pair_grads[k] accumulates (d_mx, d_my, d_a, d_b, d_c, d_opacity, d_r, d_g, d_b) for
    # the k-th (tile, Gaussian) pair; only tile-local rows are touched.
    max_len = 0
    for tile in range(t_begin, t_end):
        max_len = max(max_len, tile_ptr[tile + 1] - tile_ptr[tile])
    alphas = np.empty(max_len)
    gausses = np.empty(max_len)
    trans = np.empty(max_len)
    used = np.empty(max_len, dtype=np.int64)
    for tile in range(t_begin, t_end):
        tx = tile % n_tiles_x
        ty = tile // n_tiles_x
        x0 = tx * tile_w
        y0 = ty * tile_h
        start = tile_ptr[tile]
        stop = tile_ptr[tile + 1]
        for py in range(y0, min(y0 + tile_h, height)):
            for px in range(x0, min(x0 + tile_w, width)):
                g0 = d_image[py, px, 0]
                g1 = d_image[py, px, 1]
                g2 = d_image[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                T = 1.0
                n_used = 0
                for k in range(start, stop):
                    if T < TRANSMITTANCE_EPS:
                        break
                    g = tile_ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    if power < EXPONENT_CUTOFF:
                        continue
                    gauss = np.exp(power)
                    alpha = opacity[g] * gauss
                    alphas[n_used] = alpha
                    gausses[n_used] = gauss
                    trans[n_used] = T
                    used[n_used] = k
                    n_used += 1
                    T = T * (1.0 - alpha)
                # behind-color normalized by the transmittance after the contributor
                b0 = background[0]
                b1 = background[1]
                b2 = background[2]
                for u in range(n_used - 1, -1, -1):
                    k = used[u]
                    g = tile_ids[k]
                    alpha = alphas[u]
                    Tk = trans[u]
                    d_alpha = Tk * (g0 * (color[g, 0] - b0) + g1 * (color[g, 1] - b1)
                                    + g2 * (color[g, 2] - b2))
                    w = alpha * Tk
                    pair_grads[k, 6] += g0 * w
                    pair_grads[k, 7] += g1 * w
                    pair_grads[k, 8] += g2 * w
                    b0 = color[g, 0] * alpha + (1.0 - alpha) * b0
                    b1 = color[g, 1] * alpha + (1.0 - alpha) * b1
                    b2 = color[g, 2] * alpha + (1.0 - alpha) * b2

                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    pair_grads[k, 5] += d_alpha * gausses[u]
                    d_power = d_alpha * alpha
                    pair_grads[k, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                    pair_grads[k, 1] += d_power * (conic[g, 1] * dx + conic[g, 2] * dy)
                    pair_grads[k, 2] += -0.5 * d_power * dx * dx
                    pair_grads[k, 3] += -d_power * dx * dy
                    pair_grads[k, 4] += -0.5 * d_power * dy * dy


@dataclass
class RenderTarget:
    """Output of :func:`render` plus what the backward pass needs to replay it."""

    width: int
    height: int
    background: np.ndarray
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    projection: Projection = field(repr=False)
    tile_ptr: np.ndarray = field(repr=False)
    tile_ids: np.ndarray = field(repr=False)
    tile_w: int = TILE_SIZE
    tile_h: int = TILE_SIZE
    num_gaussians: int = 0

    @property
    def n_tiles_x(self) -> int:
        return -(-self.width // self.tile_w)

    @property
    def image(self) -> np.ndarray:
        return self.color


@dataclass
class RenderGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in GRAD_FIELDS}


def depth_order(depth: np.ndarray) -> np.ndarray:
    """Indices sorted by ascending depth, ties broken by index."""
    return np.lexsort((np.arange(len(depth)), depth))


def _bin_tiles(proj: Projection, width: int, height: int, tile_w: int, tile_h: int):
    n_tx = -(-width // tile_w)
    n_ty = -(-height // tile_h)
    order = depth_order(proj.depth)
    order = order[proj.valid[order]]
    mean = proj.mean2d[order]
    # exact axis extents of the ellipse where the exponent is >= EXPONENT_CUTOFF
    reach = -2.0 * EXPONENT_CUTOFF
    rx = np.sqrt(reach * proj.cov2d[order, 0, 0]) * (1.0 + 1e-6) + 1e-3
    ry = np.sqrt(reach * proj.cov2d[order, 1, 1]) * (1.0 + 1e-6) + 1e-3
    px0 = np.clip(np.ceil(mean[:, 0] - rx), 0, width)
    px1 = np.clip(np.floor(mean[:, 0] + rx), -1, width - 1)
    py0 = np.clip(np.ceil(mean[:, 1] - ry), 0, height)
    py1 = np.clip(np.floor(mean[:, 1] + ry), -1, height - 1)
    hit = (px0 <= px1) & (py0 <= py1)
    order, px0, px1, py0, py1 = order[hit], px0[hit], px1[hit], py0[hit], py1[hit]
    tx0 = px0.astype(np.int64) // tile_w
    tx1 = px1.astype(np.int64) // tile_w
    ty0 = py0.astype(np.int64) // tile_h
    ty1 = py1.astype(np.int64) // tile_h
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    offsets = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(offsets, counts)
    nx_rep = np.repeat(nx, counts)
    tiles = (np.repeat(ty0, counts) + local // nx_rep) * n_tx + np.repeat(tx0, counts) + local % nx_rep
    ids = np.repeat(order, counts)
    perm = np.argsort(tiles, kind="stable")
    tile_ids = ids[perm].astype(np.int64)
    tile_ptr = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tiles, minlength=n_tx * n_ty), out=tile_ptr[1:])
    return tile_ptr, tile_ids


def _single_tile(proj: Projection):
    order = depth_order(proj.depth)
    order = order[proj.valid[order]].astype(np.int64)
    return np.array([0, len(order)], dtype=np.int64), order


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run(kernel, n_tiles: int, threads: int, *args):
    chunks = _chunks(n_tiles, threads)
    if len(chunks) <= 1:
        for a, b in chunks:
            kernel(a, b, *args)
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(kernel, a, b, *args) for a, b in chunks]
        for f in futures:
            f.result()


def render(cloud: GaussianCloud, camera: CameraView, background=(0.0, 0.0, 0.0), *,
           tiled: bool = True, tile_size: int = TILE_SIZE, threads: int = 1) -> RenderTarget:
    """Alpha-composite ``cloud`` as seen from ``camera``.

    ``tiled=False`` evaluates every visible Gaussian at every pixel; it exists
    as a reference for the tiled path and produces identical bits.
    """
    cloud.check_finite()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = int(camera.width), int(camera.height)
    proj = project_cloud(cloud, camera)
    if tiled:
        tile_w = tile_h = int(tile_size)
        tile_ptr, tile_ids = _bin_tiles(proj, W, H, tile_w, tile_h)
    else:
        tile_w, tile_h = W, H
        tile_ptr, tile_ids = _single_tile(proj)
    color = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    target = RenderTarget(W, H, bg, color, alpha, proj, tile_ptr, tile_ids, tile_w, tile_h, len(cloud))
    _run(_forward_tiles, len(tile_ptr) - 1, threads,
         tile_ptr, tile_ids, target.n_tiles_x, tile_w, tile_h, W, H,
         np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
         np.ascontiguousarray(proj.opacity), np.ascontiguousarray(proj.color), bg, color, alpha)
    return target


def render_backward(cloud: GaussianCloud, camera: CameraView, target: RenderTarget, d_image,
                    *, threads: int = 1) -> RenderGradients:
    """Gradient of ``sum(d_image * target.color)`` w.r.t. every cloud parameter."""
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != target.color.shape:
        raise ValueError(f"d_image shape {d_image.shape} != image shape {target.color.shape}")
    if len(cloud) != target.num_gaussians:
        raise ValueError("cloud does not match the rendered target")
    proj = target.projection
    n = len(cloud)
    pair_grads = np.zeros((len(target.tile_ids), 9))
    _run(_backward_tiles, len(target.tile_ptr) - 1, threads,
         target.tile_ptr, target.tile_ids, target.n_tiles_x, target.tile_w, target.tile_h,
         target.width, target.height,
         np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
         np.ascontiguousarray(proj.opacity), np.ascontiguousarray(proj.color),
         target.background, d_image, pair_grads)
    screen = np.zeros((n, 9))
    # sequential scatter in tile order keeps the sum independent of thread count
    np.add.at(screen, target.tile_ids, pair_grads)
    grads = projection_backward(proj, screen[:, 0:2], screen[:, 2:5], screen[:, 5], screen[:, 6:9])
    return RenderGradients(**grads)
