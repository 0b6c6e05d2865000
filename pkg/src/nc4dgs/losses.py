"""Fine-stage loss terms and their gradients.

Each loss has a value function matching its documented formula and a
``*_grad`` companion used by the trainer.  The perceptual slot of the
fine-stage objective is filled by D-SSIM, ``(1 - SSIM) / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
# residuals this small are rounding noise; Adam would turn their sign into full-size steps
L1_DEAD_ZONE = 1e-12


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


# --- photometric ------------------------------------------------------------

def l1_loss(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def l1_loss_grad(pred, gt) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    r = pred - gt
    return np.where(np.abs(r) > L1_DEAD_ZONE, np.sign(r), 0.0) / pred.size


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    # separable window over the two spatial axes, zero padding outside the image
    w = gaussian_window()
    out = correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def ssim_map(pred, gt) -> np.ndarray:
    """Per-pixel SSIM of (H, W) or (H, W, C) images in [0, 1]."""
    x, y = _check_pair(pred, gt)
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim_value(pred, gt) -> float:
    return float(np.mean(ssim_map(pred, gt)))


def ssim_value_and_grad(pred, gt) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient w.r.t. ``pred``, sharing one set of blurs."""
    x, y = _check_pair(pred, gt)
    # blur the five moment images in one stacked pass
    stats = _blur(np.stack([x, y, x * x, y * y, x * y], axis=-1))
    mx, my, exx, eyy, exy = np.moveaxis(stats, -1, 0)
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = exx - mx * mx + eyy - my * my + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    s = smap / x.size
    g_mx = s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2)
    g_exy = s * 2.0 / a2
    g_exx = -s / b2
    # the zero-padded symmetric window is self-adjoint
    back = _blur(np.stack([g_mx, g_exx, g_exy], axis=-1))
    grad = back[..., 0] + 2.0 * x * back[..., 1] + y * back[..., 2]
    return float(np.mean(smap)), grad


def ssim_grad(pred, gt) -> np.ndarray:
    """Gradient of mean SSIM w.r.t. ``pred``."""
    return ssim_value_and_grad(pred, gt)[1]


def dssim_loss(pred, gt) -> float:
    return (1.0 - ssim_value(pred, gt)) / 2.0


def dssim_loss_grad(pred, gt) -> np.ndarray:
    return -0.5 * ssim_grad(pred, gt)


def dssim_loss_and_grad(pred, gt) -> tuple[float, np.ndarray]:
    value, grad = ssim_value_and_grad(pred, gt)
    return (1.0 - value) / 2.0, -0.5 * grad


# --- grid total variation ---------------------------------------------------

def tv_loss(grid) -> float:
    """Mean over spatial axes of the mean squared feature step between neighbors.

    ``grid`` has any number of spatial axes followed by one feature axis.
    """
    grid = np.asarray(grid, dtype=np.float64)
    axes = range(grid.ndim - 1)
    total = 0.0
    for a in axes:
        d = np.diff(grid, axis=a)
        pairs = d.size // grid.shape[-1]
        total += float(np.sum(d * d)) / pairs
    return total / (grid.ndim - 1)


def tv_loss_grad(grid, scale: float = 1.0) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    n_axes = grid.ndim - 1
    out = np.zeros_like(grid)
    for a in range(n_axes):
        d = np.diff(grid, axis=a)
        coef = 2.0 * scale / ((d.size // grid.shape[-1]) * n_axes)
        d *= coef
        hi = [slice(None)] * grid.ndim
        lo = [slice(None)] * grid.ndim
        hi[a] = slice(1, None)
        lo[a] = slice(None, -1)
        out[tuple(hi)] += d
        out[tuple(lo)] -= d
    return out


@numba.njit(cache=True)
def _tv_axis(g, scale, out):
    # g viewed as (outer, r, inner); differences taken along the middle axis
    a, r, b = g.shape
    pairs = a * (r - 1) * b
    s = 0.0
    for i in range(a):
        for j in range(r - 1):
            for k in range(b):
                e = g[i, j + 1, k] - g[i, j, k]
                s += e * e
                out[i, j + 1, k] += scale * e
                out[i, j, k] -= scale * e
    return s, pairs


def tv_loss_and_grad(grid, scale: float = 1.0, out: np.ndarray | None = None):
    """Value and (scaled) gradient in one pass over each axis.

    With ``out`` the gradient is accumulated into that array in place.
    """
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if out is None:
        out = np.zeros_like(grid)
    n_axes = grid.ndim - 1
    if n_axes < 1 or min(grid.shape[:-1]) < 2:
        raise ValueError("tv_loss needs at least two cells along every spatial axis")
    feat = grid.shape[-1]
    total = 0.0
    for a in range(n_axes):
        r = grid.shape[a]
        outer = int(np.prod(grid.shape[:a], dtype=np.int64))
        view = grid.reshape(outer, r, -1)
        pairs = outer * (r - 1) * (view.shape[2] // feat)
        coef = 2.0 * scale / (pairs * n_axes)
        s, _ = _tv_axis(view, coef, out.reshape(outer, r, -1))
        total += s / pairs
    return total / n_axes, out


# --- neighbor constraint ----------------------------------------------------

@dataclass
class NeighborGraph:
    """Directed kNN graph: node ``i`` has edges ``i -> neighbors[i, :]``."""

    neighbors: np.ndarray  # (N, k) int
    weights: np.ndarray  # (N, k) edge lengths at build time

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def num_points(self) -> int:
        return self.neighbors.shape[0]

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) array of (i, j) pairs in node-major order."""
        i = np.repeat(np.arange(self.num_points), self.k)
        return np.stack([i, self.neighbors.ravel()], axis=1)

    def edge_weights(self, positions) -> np.ndarray:
        u = np.asarray(positions, dtype=np.float64)
        return np.linalg.norm(u[:, None, :] - u[self.neighbors], axis=-1)


def build_neighbor_graph(positions, k: int = 20, chunk: int = 1024) -> NeighborGraph:
    """Exact Euclidean kNN, ties broken by lower index; ``k`` is clamped to N - 1."""
    u = np.asarray(positions, dtype=np.float64)
    n = len(u)
    if n < 2:
        raise ValueError("a neighbor graph needs at least two points")
    k = min(int(k), n - 1)
    neighbors = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        block = u[start:start + chunk]
        d2 = np.sum((block[:, None, :] - u[None, :, :]) ** 2, axis=-1)
        rows = np.arange(len(block))
        d2[rows, start + rows] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        neighbors[start:start + len(block)] = order[:, :k]
    graph = NeighborGraph(neighbors, np.zeros((n, k)))
    graph.weights = graph.edge_weights(u)
    return graph


@dataclass
class GateState:
    tau: float
    point_gates: np.ndarray  # (N,) bool
    edge_gates: np.ndarray = field(repr=False, default=None)  # (N, k) float in {0, 1}

    @property
    def active_fraction(self) -> float:
        return float(np.mean(self.edge_gates)) if self.edge_gates.size else 0.0


def compute_gates(graph: NeighborGraph, u_prev, u_curr, tau: float, gated: bool = True) -> GateState:
    disp = np.linalg.norm(np.asarray(u_curr) - np.asarray(u_prev), axis=1)
    m = disp > tau
    if gated:
        edge = (m[:, None] & m[graph.neighbors]).astype(np.float64)
    else:
        edge = np.ones(graph.neighbors.shape)
    return GateState(float(tau), m, edge)


def group_offsets(graph: NeighborGraph, u) -> np.ndarray:
    """Offset of each point from the mean of its neighbors."""
    u = np.asarray(u, dtype=np.float64)
    return u - u[graph.neighbors].mean(axis=1)


def _check_points(graph: NeighborGraph, u_prev, u_curr):
    u_prev = np.asarray(u_prev, dtype=np.float64)
    u_curr = np.asarray(u_curr, dtype=np.float64)
    if u_prev.shape != (graph.num_points, 3) or u_curr.shape != (graph.num_points, 3):
        raise ValueError(
            f"graph has {graph.num_points} points but got {u_prev.shape} and {u_curr.shape}"
        )
    return u_prev, u_curr


def neighbor_loss_with_grad(graph: NeighborGraph, u_prev, u_curr, tau: float, gated: bool = True):
    """Gated neighbor loss, its gradient w.r.t. ``u_curr`` and the gate state.

    ``u_prev`` and the gates are constants of the step.  With ``gated=False``
    every edge is active (the gate is removed, not the loss).
    """
    u_prev, u_curr = _check_points(graph, u_prev, u_curr)
    gates = compute_gates(graph, u_prev, u_curr, tau, gated)
    w = graph.edge_weights(u_prev)
    diff = group_offsets(graph, u_curr) - group_offsets(graph, u_prev)
    coef = np.sum(w * gates.edge_gates, axis=1)
    value = float(np.sum(coef * np.sum(diff * diff, axis=1)))
    g_diff = 2.0 * coef[:, None] * diff
    grad = g_diff.copy()
    spread = np.repeat(-g_diff / graph.k, graph.k, axis=0)
    np.add.at(grad, graph.neighbors.ravel(), spread)
    return value, grad, gates


def neighbor_loss_grad_prev(graph: NeighborGraph, u_prev, u_curr, gates: GateState) -> np.ndarray:
    """Gradient w.r.t. ``u_prev`` with the gates held fixed (edge weights included)."""
    u_prev, u_curr = _check_points(graph, u_prev, u_curr)
    w = graph.edge_weights(u_prev)
    diff = group_offsets(graph, u_curr) - group_offsets(graph, u_prev)
    coef = np.sum(w * gates.edge_gates, axis=1)
    g_diff = -2.0 * coef[:, None] * diff
    grad = g_diff.copy()
    np.add.at(grad, graph.neighbors.ravel(), np.repeat(-g_diff / graph.k, graph.k, axis=0))
    # d w_ij: unit edge vector, scaled by the node's squared offset change
    sq = np.sum(diff * diff, axis=1)
    vec = u_prev[:, None, :] - u_prev[graph.neighbors]
    unit = vec / np.maximum(w, 1e-300)[..., None]
    term = (sq[:, None] * gates.edge_gates)[..., None] * unit
    grad += term.sum(axis=1)
    np.add.at(grad, graph.neighbors.ravel(), -term.reshape(-1, 3))
    return grad


def neighbor_loss(graph: NeighborGraph, u_prev, u_curr, tau: float, gated: bool = True) -> float:
    return neighbor_loss_with_grad(graph, u_prev, u_curr, tau, gated)[0]


def adaptive_tau(displacements, factor: float = 2.0) -> float:
    """``factor`` times the median per-point displacement."""
    d = np.asarray(displacements, dtype=np.float64).ravel()
    return float(factor * np.median(d)) if d.size else 0.0


# --- combined ---------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    dssim: float = 0.01
    neighbor: float = 1.0
    tv: float = 1.0

    def __post_init__(self):
        for name in ("l1", "dssim", "neighbor", "tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

    def as_vector(self) -> np.ndarray:
        return np.array([self.l1, self.dssim, self.neighbor, self.tv])


COMPONENTS = ("l1", "dssim", "neighbor", "tv")


def fine_loss(renders, gts, grid, graph, u_prev, u_curr, weights: LossWeights = LossWeights(),
              tau: float = 0.0, gated: bool = True):
    """Weighted fine-stage objective and its per-term breakdown.

    ``renders``/``gts`` are single images or equal-length sequences of
    images; photometric terms are averaged over the images.
    """
    if isinstance(renders, np.ndarray) and renders.ndim == 3:
        renders, gts = [renders], [gts]
    if len(renders) != len(gts):
        raise ValueError("renders and ground truths differ in count")
    comps = {
        "l1": float(np.mean([l1_loss(r, g) for r, g in zip(renders, gts)])),
        "dssim": float(np.mean([dssim_loss(r, g) for r, g in zip(renders, gts)])),
        "neighbor": neighbor_loss(graph, u_prev, u_curr, tau, gated) if graph is not None else 0.0,
        "tv": tv_loss(grid) if grid is not None else 0.0,
    }
    total = float(np.dot(weights.as_vector(), [comps[c] for c in COMPONENTS]))
    return total, comps
