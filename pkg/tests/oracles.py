"""Brute-force reference implementations used as test oracles.

Each function recomputes a quantity from its defining formula with plain
Python loops and none of the package's vectorized helpers, so agreement
with the package is evidence rather than tautology.
"""
from __future__ import annotations

import math

import numpy as np


def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def project_one(position, rotation, log_scale, K, E, lowpass=0.3):
    """Mean, 2D covariance and depth of one Gaussian by the EWA formula."""
    W = E[:3, :3]
    t = W @ position + E[:3, 3]
    x, y, z = t
    fx, fy = K[0, 0], K[1, 1]
    J = np.array([[fx / z, 0.0, -fx * x / z**2], [0.0, fy / z, -fy * y / z**2]])
    R = quat_matrix(rotation)
    S = np.diag(np.exp(2.0 * np.asarray(log_scale)))
    cov = J @ W @ R @ S @ R.T @ W.T @ J.T
    cov = cov + lowpass * np.eye(2)
    mean = np.array([fx * x / z + K[0, 2], fy * y / z + K[1, 2]])
    return mean, cov, z


def render_naive(cloud, camera, background=(0.0, 0.0, 0.0), near=0.01, t_eps=1e-4, cutoff=-12.0):
    """Per-pixel loop over every Gaussian, sorted by depth then index."""
    H, W = camera.height, camera.width
    items = []
    for i in range(len(cloud)):
        mean, cov, z = project_one(cloud.positions[i], cloud.rotations[i], cloud.log_scales[i],
                                   camera.K, camera.E)
        if z <= near:
            continue
        inv = np.linalg.inv(cov)
        op = 1.0 / (1.0 + math.exp(-cloud.opacity_logits[i]))
        items.append((z, i, mean, inv, op, cloud.colors[i]))
    items.sort(key=lambda it: (it[0], it[1]))
    img = np.zeros((H, W, 3))
    for py in range(H):
        for px in range(W):
            T = 1.0
            c = np.zeros(3)
            for _, _, mean, inv, op, col in items:
                if T < t_eps:
                    break
                d = np.array([px - mean[0], py - mean[1]])
                power = -0.5 * float(d @ inv @ d)
                if power < cutoff:
                    continue
                a = op * math.exp(power)
                c += col * a * T
                T *= 1.0 - a
            img[py, px] = c + T * np.asarray(background)
    return img


def l1_naive(pred, gt):
    total = 0.0
    count = 0
    for idx in np.ndindex(pred.shape):
        total += abs(pred[idx] - gt[idx])
        count += 1
    return total / count


def tv_naive(grid):
    """Triple loop over a (R0, R1, R2, d) grid."""
    R0, R1, R2, _ = grid.shape
    sums = [0.0, 0.0, 0.0]
    counts = [0, 0, 0]
    for i in range(R0):
        for j in range(R1):
            for k in range(R2):
                for axis, (a, b, c) in enumerate(((i + 1, j, k), (i, j + 1, k), (i, j, k + 1))):
                    if a < R0 and b < R1 and c < R2:
                        d = grid[a, b, c] - grid[i, j, k]
                        sums[axis] += float(np.dot(d, d))
                        counts[axis] += 1
    return sum(s / n for s, n in zip(sums, counts)) / 3.0


def ssim_naive(pred, gt, size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Windowed SSIM evaluated pixel by pixel with an explicit 2D window and zero padding."""
    r = size // 2
    ax = np.arange(size) - r
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    win = np.outer(g, g)
    H, W = pred.shape[:2]
    pred = pred.reshape(H, W, -1)
    gt = gt.reshape(H, W, -1)
    C = pred.shape[2]
    px = np.zeros((H + 2 * r, W + 2 * r, C))
    py = np.zeros_like(px)
    px[r:r + H, r:r + W] = pred
    py[r:r + H, r:r + W] = gt
    total = 0.0
    for i in range(H):
        for j in range(W):
            x = px[i:i + size, j:j + size]
            y = py[i:i + size, j:j + size]
            for ch in range(C):
                xw, yw = x[..., ch], y[..., ch]
                mx = np.sum(win * xw)
                my = np.sum(win * yw)
                sxx = np.sum(win * xw * xw) - mx * mx
                syy = np.sum(win * yw * yw) - my * my
                sxy = np.sum(win * xw * yw) - mx * my
                total += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return total / (H * W * C)


def knn_naive(points, k):
    """Edge set {(i, j)} of the k nearest neighbors, ties to the lower index."""
    n = len(points)
    k = min(k, n - 1)
    edges = set()
    for i in range(n):
        cand = []
        for j in range(n):
            if j != i:
                d = sum((points[i][a] - points[j][a]) ** 2 for a in range(3))
                cand.append((d, j))
        cand.sort()
        for _, j in cand[:k]:
            edges.add((i, j))
    return edges


def neighbor_loss_naive(neighbors, u_prev, u_curr, tau, gated=True):
    """Sum over directed edges of |L_i^t - L_i^{t-1}|^2 w_ij m_ij."""
    n = len(neighbors)
    moved = [math.dist(u_curr[i], u_prev[i]) > tau for i in range(n)]

    def offset(u, i):
        nb = neighbors[i]
        center = [sum(u[j][a] for j in nb) / len(nb) for a in range(3)]
        return [u[i][a] - center[a] for a in range(3)]

    total = 0.0
    for i in range(n):
        li_t = offset(u_curr, i)
        li_p = offset(u_prev, i)
        sq = sum((li_t[a] - li_p[a]) ** 2 for a in range(3))
        for j in neighbors[i]:
            m = (moved[i] and moved[j]) if gated else True
            if m:
                total += sq * math.dist(u_prev[i], u_prev[j])
    return total


def psnr_naive(pred, gt):
    mse = sum((float(a) - float(b)) ** 2 for a, b in zip(pred.ravel(), gt.ravel())) / pred.size
    return 10.0 * math.log10(1.0 / mse)


def finite_difference(f, x, eps):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g
