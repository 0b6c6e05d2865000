"""Coarse-to-fine optimization of a deformable Gaussian cloud.

The coarse stage fits the canonical cloud to the middle frame with L1 only.
The fine stage grows a frame window symmetrically around the middle frame,
one frame per side per step, and optimizes the canonical cloud and the
deformation field jointly under the weighted fine objective.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .config import strict_from_dict
from .deform import DeformationField, deform_cloud, deformed_positions, normalized_time
from .gaussians import GaussianCloud
from .losses import (
    LossWeights,
    NeighborGraph,
    adaptive_tau,
    build_neighbor_graph,
    dssim_loss_and_grad,
    l1_loss,
    l1_loss_grad,
    neighbor_loss_grad_prev,
    neighbor_loss_with_grad,
    tv_loss_and_grad,
)
from .numerics import quat_to_rotation
from .rasterizer import render, render_backward
from .scenegen import MultiViewSequence

CLOUD_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")
FIELD_GROUPS = ("grid", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class DensifyConfig:
    enabled: bool = False
    interval: int = 500
    grad_threshold: float = 2e-4
    scale_threshold: float = 0.08
    prune_opacity: float = 0.005


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.6e-4
    coarse_iters: int = 3000
    fine_iters_per_step: int = 3000
    k_neighbors: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float | None = None  # absolute threshold; None selects the adaptive rule
    tau_factor: float = 2.0
    gate: bool = True
    neighbor_grad_to_canonical: bool = True
    detach_prev: bool = False
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed: int = 0
    batch: int = 1
    train_views: list | None = None
    threads: int = 1
    init: str = "perturbed_gt"
    init_noise: float = 0.05
    init_points: int = 200
    grid_res: int = 32
    feature_dim: int = 16
    hidden: int = 64
    space_freqs: int = 6
    time_freqs: int = 4
    grid_init: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("coarse_iters", "fine_iters_per_step", "batch", "k_neighbors", "threads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.init not in ("perturbed_gt", "random"):
            raise ValueError("init must be 'perturbed_gt' or 'random'")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return strict_from_dict(cls, data, nested=_NESTED)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {(TrainConfig, "weights"): LossWeights, (TrainConfig, "densify"): DensifyConfig}


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    a = lr / bc1
    s = 1.0 / math.sqrt(bc2)
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= a * mi / (math.sqrt(vi) * s + eps)


class Adam:
    """Bias-corrected Adam over named parameter groups, updated in place.

    Each group keeps its own step count so groups that join late (the
    deformation field after the coarse stage) get a proper bias correction.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter group {name}")
        for name, g in grads.items():
            p = params[name]
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                         self.m[name].reshape(-1), self.v[name].reshape(-1), self.lr,
                         self.beta1, self.beta2, self.eps, 1.0 - self.beta1**t, 1.0 - self.beta2**t)

    def remap(self, prefix: str, index: np.ndarray) -> None:
        """Reindex per-Gaussian moments after densify/prune; ``-1`` rows start fresh."""
        for name in list(self.m):
            if not name.startswith(prefix):
                continue
            for store in (self.m, self.v):
                old = store[name]
                new = np.zeros((len(index),) + old.shape[1:])
                keep = index >= 0
                new[keep] = old[index[keep]]
                store[name] = new


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], optimizer: Adam) -> None:
    optimizer.step(params, grads)


@dataclass
class FitState:
    cloud: GaussianCloud
    field: DeformationField
    optimizer: Adam
    window: tuple[int, int] | None = None
    iteration: int = 0
    coarse_iteration: int = 0
    fine_step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    graph: NeighborGraph | None = None
    tau: float = 0.0
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None

    def params(self) -> dict[str, np.ndarray]:
        p = {f"cloud.{k}": v for k, v in self.cloud.params().items()}
        p.update({f"field.{k}": v for k, v in self.field.params().items()})
        return p


def _bbox(sequence: MultiViewSequence, cloud: GaussianCloud | None):
    if sequence.bbox is not None:
        return np.asarray(sequence.bbox[0]), np.asarray(sequence.bbox[1])
    pts = cloud.positions
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.25 * (hi - lo).max() + 1e-3
    return lo - pad, hi + pad


def cold_start_cloud(n: int, bbox, rng: np.random.Generator) -> GaussianCloud:
    """Uniform points in the box with isotropic scale = half the mean nearest-neighbor distance."""
    lo, hi = np.asarray(bbox[0]), np.asarray(bbox[1])
    pts = rng.uniform(lo, hi, size=(n, 3))
    d2 = np.sum((pts[:, None] - pts[None]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    scale = 0.5 * np.mean(np.sqrt(d2.min(axis=1)))
    return GaussianCloud(
        positions=pts,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), np.log(scale)),
        opacity_logits=np.zeros(n),
        colors=np.full((n, 3), 0.5),
    )


def perturbed_cloud(cloud: GaussianCloud, sigma: float, rng: np.random.Generator) -> GaussianCloud:
    out = cloud.copy()
    out.positions += rng.normal(scale=sigma, size=out.positions.shape)
    return out


def init_state(sequence: MultiViewSequence, config: TrainConfig, cloud: GaussianCloud | None = None) -> FitState:
    """Fresh state; ``cloud`` is used as given (callers perturb it if they want)."""
    rng = np.random.default_rng(config.seed)
    bbox = _bbox(sequence, cloud)
    if cloud is None:
        cloud = cold_start_cloud(config.init_points, bbox, rng)
    field_ = DeformationField.create(
        bbox[0], bbox[1], rng, resolution=config.grid_res, feature_dim=config.feature_dim,
        hidden=config.hidden, space_freqs=config.space_freqs, time_freqs=config.time_freqs,
        grid_init=config.grid_init,
    )
    return FitState(cloud=cloud.copy(), field=field_, optimizer=Adam(config.learning_rate), rng=rng)


def static_view(cloud: GaussianCloud):
    """The canonical cloud as the renderer sees it at zero deformation, with backward.

    Produces the same bits as ``deform_cloud`` with a zero head, so the
    coarse-stage renders match fine-stage renders before any fine step.
    """
    q_norm = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    q_hat = cloud.rotations / q_norm
    view = GaussianCloud(cloud.positions + 0.0, q_hat, cloud.log_scales.copy(),
                         cloud.opacity_logits + 0.0, cloud.colors.copy())

    def backward(grads):
        d = dict(grads)
        dq = d["rotations"]
        d["rotations"] = (dq - np.sum(dq * q_hat, axis=1, keepdims=True) * q_hat) / q_norm
        return d

    return view, backward


def _views(sequence: MultiViewSequence, config: TrainConfig) -> list[int]:
    views = list(range(sequence.num_views)) if config.train_views is None else list(config.train_views)
    if not views or any(v < 0 or v >= sequence.num_views for v in views):
        raise ValueError(f"train_views {config.train_views} out of range for {sequence.num_views} views")
    return views


def _photometric(img, gt, weights: LossWeights, with_dssim: bool = True):
    l1 = l1_loss(img, gt)
    d_img = weights.l1 * l1_loss_grad(img, gt)
    ds = 0.0
    if with_dssim:
        ds, g_ds = dssim_loss_and_grad(img, gt)
        if weights.dssim:
            d_img += weights.dssim * g_ds
    return l1, ds, d_img


def _accumulate_density_stats(state: FitState, d_pos: np.ndarray) -> None:
    norms = np.linalg.norm(d_pos, axis=1)
    if state.grad_accum is None or len(state.grad_accum) != len(norms):
        state.grad_accum = np.zeros(len(norms))
        state.grad_count = np.zeros(len(norms))
    state.grad_accum += norms
    state.grad_count += norms > 0


def coarse_fit(state: FitState, sequence: MultiViewSequence, config: TrainConfig,
               log: Callable[[dict], None] | None = None, iters: int | None = None) -> FitState:
    """Static fit of the canonical cloud to the middle frame with L1.

    One uniformly sampled training view per iteration (``config.batch``
    views per iteration when larger).  The deformation field is untouched.
    """
    views = _views(sequence, config)
    mid = sequence.mid_frame
    iters = config.coarse_iters if iters is None else iters
    unit_l1 = LossWeights(l1=1.0, dssim=0.0, neighbor=0.0, tv=0.0)
    for _ in range(iters):
        picks = state.rng.choice(views, size=config.batch)
        view, vbw = static_view(state.cloud)
        grads = {k: np.zeros_like(v) for k, v in view.params().items()}
        l1_total = 0.0
        for v in picks:
            cam = sequence.cameras[v]
            target = render(view, cam, sequence.background, threads=config.threads)
            l1, _, d_img = _photometric(target.color, sequence.images[v, mid], unit_l1, with_dssim=False)
            rg = render_backward(view, cam, target, d_img / config.batch, threads=config.threads)
            for k, g in rg.as_dict().items():
                grads[k] += g
            l1_total += l1 / config.batch
        if not np.isfinite(l1_total):
            raise FloatingPointError(f"non-finite loss at coarse iteration {state.coarse_iteration}")
        cloud_grads = vbw(grads)
        state.optimizer.step(state.params(), {f"cloud.{k}": g for k, g in cloud_grads.items()})
        state.iteration += 1
        state.coarse_iteration += 1
        if log is not None:
            log({"stage": "coarse", "iteration": state.iteration, "step": 0, "view": int(picks[0]),
                 "frame": mid, "total": l1_total, "l1": l1_total, "dssim": 0.0, "tv": 0.0,
                 "neighbor": 0.0, "active_gate_fraction": 0.0})
    return state


def progressive_windows(num_frames: int) -> list[tuple[int, int]]:
    """Frame windows ``[lo, hi]`` grown one frame per side around the middle frame."""
    mid = num_frames // 2
    out = []
    k = 0
    while True:
        lo, hi = max(0, mid - k), min(num_frames - 1, mid + k)
        out.append((lo, hi))
        if lo == 0 and hi == num_frames - 1:
            return out
        k += 1


def window_tau(state: FitState, num_frames: int, window: tuple[int, int], factor: float) -> float:
    """Adaptive gate threshold: ``factor`` x median inter-frame displacement in the window."""
    lo, hi = window
    disps = []
    for t in range(max(lo, 1), hi + 1):
        a = deformed_positions(state.field, state.cloud, normalized_time(t - 1, num_frames))
        b = deformed_positions(state.field, state.cloud, normalized_time(t, num_frames))
        disps.append(np.linalg.norm(b - a, axis=1))
    return adaptive_tau(np.concatenate(disps) if disps else np.zeros(0), factor)


def fine_iteration(state: FitState, sequence: MultiViewSequence, config: TrainConfig,
                   views: list[int], frames: np.ndarray) -> dict:
    """One fine-stage step on ``config.batch`` sampled (view, frame) pairs."""
    w = config.weights
    T = sequence.num_frames
    cloud_grads: dict[str, np.ndarray] = {}
    field_grads: dict[str, np.ndarray] = {}
    rec = {"l1": 0.0, "dssim": 0.0, "neighbor": 0.0, "active_gate_fraction": 0.0}
    inv_b = 1.0 / config.batch
    picks = []
    for _ in range(config.batch):
        v = int(state.rng.choice(views))
        t = int(state.rng.choice(frames))
        picks.append((v, t))
        deformed, dbw = deform_cloud(state.field, state.cloud, normalized_time(t, T))
        cam = sequence.cameras[v]
        target = render(deformed, cam, sequence.background, threads=config.threads)
        l1, ds, d_img = _photometric(target.color, sequence.images[v, t], w)
        rg = render_backward(deformed, cam, target, d_img * inv_b, threads=config.threads).as_dict()

        # the previous frame is clamped to the window so a window's first frame compares with itself
        t_prev = max(t - 1, state.window[0]) if state.window is not None else max(t - 1, 0)
        if config.detach_prev:
            u_prev = deformed_positions(state.field, state.cloud, normalized_time(t_prev, T))
        else:
            prev, pbw = deform_cloud(state.field, state.cloud, normalized_time(t_prev, T))
            u_prev = prev.positions
        nl, g_u, gates = neighbor_loss_with_grad(state.graph, u_prev, deformed.positions, state.tau, config.gate)
        fg, cg = dbw(rg)
        if w.neighbor and nl > 0.0:
            # detaching the previous frame leaves a one-sided gradient; sending that to the
            # canonical cloud drags it around, so only the full gradient is routed there by default
            parts = [dbw({"positions": (w.neighbor * inv_b) * g_u})]
            if not config.detach_prev:
                g_p = neighbor_loss_grad_prev(state.graph, u_prev, deformed.positions, gates)
                parts.append(pbw({"positions": (w.neighbor * inv_b) * g_p}))
            for fgn, cgn in parts:
                for k in fg:
                    fg[k] += fgn[k]
                if config.neighbor_grad_to_canonical:
                    cg["positions"] += cgn["positions"]
        for acc, new in ((field_grads, fg), (cloud_grads, cg)):
            for k, g in new.items():
                if k in acc:
                    acc[k] += g
                else:
                    acc[k] = g
        rec["l1"] += l1 * inv_b
        rec["dssim"] += ds * inv_b
        rec["neighbor"] += nl * inv_b
        rec["active_gate_fraction"] += gates.active_fraction * inv_b

    tv, _ = tv_loss_and_grad(state.field.grid, w.tv, out=field_grads["grid"])
    rec["tv"] = tv
    rec["total"] = w.l1 * rec["l1"] + w.dssim * rec["dssim"] + w.neighbor * rec["neighbor"] + w.tv * tv
    if not np.isfinite(rec["total"]):
        raise FloatingPointError(f"non-finite loss at iteration {state.iteration}")
    if config.densify.enabled:
        _accumulate_density_stats(state, cloud_grads["positions"])
    grads = {f"cloud.{k}": g for k, g in cloud_grads.items()}
    grads.update({f"field.{k}": g for k, g in field_grads.items()})
    state.optimizer.step(state.params(), grads)
    state.iteration += 1
    rec["view"], rec["frame"] = picks[0]
    return rec


def start_fine_step(state: FitState, sequence: MultiViewSequence, config: TrainConfig,
                    window: tuple[int, int]) -> None:
    state.window = window
    state.graph = build_neighbor_graph(state.cloud.positions, config.k_neighbors)
    if config.tau is not None:
        state.tau = float(config.tau)
    else:
        state.tau = window_tau(state, sequence.num_frames, window, config.tau_factor)


def progressive_fine_fit(state: FitState, sequence: MultiViewSequence, config: TrainConfig,
                         log: Callable[[dict], None] | None = None) -> FitState:
    """Fine stage over symmetric growing windows, ``fine_iters_per_step`` iterations each."""
    views = _views(sequence, config)
    for step, window in enumerate(progressive_windows(sequence.num_frames)):
        start_fine_step(state, sequence, config, window)
        frames = np.arange(window[0], window[1] + 1)
        for it in range(config.fine_iters_per_step):
            rec = fine_iteration(state, sequence, config, views, frames)
            if (config.densify.enabled and state.graph is not None
                    and (it + 1) % config.densify.interval == 0 and it + 1 < config.fine_iters_per_step):
                densify_and_prune(state, config.densify)
                start_fine_step(state, sequence, config, window)
            if log is not None:
                rec.update({"stage": "fine", "iteration": state.iteration, "step": step + 1,
                            "window": list(window), "tau": state.tau})
                log(rec)
        state.fine_step = step + 1
    return state


def densify_and_prune(state: FitState, thresholds: DensifyConfig, grad_stats: np.ndarray | None = None) -> FitState:
    """Clone small high-gradient Gaussians, split large ones, prune faint ones.

    ``grad_stats`` defaults to the mean positional gradient norm accumulated
    since the last call.  Optimizer moments follow their Gaussians; new
    Gaussians start with fresh moments.  The neighbor graph is invalidated.
    """
    cloud = state.cloud
    n = len(cloud)
    if grad_stats is None:
        if state.grad_accum is None or len(state.grad_accum) != n:
            grad_stats = np.zeros(n)
        else:
            grad_stats = state.grad_accum / np.maximum(state.grad_count, 1)
    grad_stats = np.asarray(grad_stats, dtype=np.float64)
    big = cloud.scales.max(axis=1) > thresholds.scale_threshold
    hot = grad_stats > thresholds.grad_threshold
    clone = hot & ~big
    split = hot & big

    parts = [cloud]
    index = [np.arange(n)]
    if clone.any():
        parts.append(cloud.subset(clone))
        index.append(np.full(int(clone.sum()), -1))
    if split.any():
        src = cloud.subset(split)
        children = []
        for _ in range(2):
            child = src.copy()
            R = quat_to_rotation(src.rotations)
            offs = state.rng.normal(size=(len(src), 3)) * src.scales
            child.positions = src.positions + np.einsum("nij,nj->ni", R, offs)
            child.log_scales = src.log_scales - np.log(1.6)
            children.append(child)
        parts.extend(children)
        index.extend([np.full(len(src), -1)] * 2)
    merged = GaussianCloud.concat(parts)
    index = np.concatenate(index)
    keep = np.ones(len(merged), dtype=bool)
    keep[:n][split] = False  # split parents are replaced by their children
    keep &= merged.opacities >= thresholds.prune_opacity
    state.cloud = merged.subset(keep)
    state.optimizer.remap("cloud.", index[keep])
    state.graph = None
    state.grad_accum = None
    state.grad_count = None
    return state


def fit(sequence: MultiViewSequence, config: TrainConfig, cloud: GaussianCloud | None = None,
        log: Callable[[dict], None] | None = None, coarse_only: bool = False) -> FitState:
    state = init_state(sequence, config, cloud)
    coarse_fit(state, sequence, config, log)
    if not coarse_only:
        progressive_fine_fit(state, sequence, config, log)
    return state


def jsonl_logger(fh) -> Callable[[dict], None]:
    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return write
