"""Toy multi-view video transformer mechanics.

Shape algebra for video latents and tokens, the reference/pose latent
concatenation, Plücker camera maps and their patch encoder, the two token
layouts used by the dual attention block, and the block itself at small
dimensions.  Nothing here is trained; the point is that every reshape,
concatenation and attention pass can be checked exactly.

Token grids are arrays indexed ``(view, frame, token, channel)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView

TEMPORAL_STRIDE = 4
SPATIAL_STRIDE = 8
LATENT_CHANNELS = 16


@dataclass(frozen=True)
class LatentSpec:
    """Latent video geometry.

    ``f`` latent frames of ``h x w`` cells with ``channels`` channels come
    from ``4f`` pixel frames of ``8h x 8w``.  ``n`` is the patch size and
    ``C`` the token width; ``V`` is the number of views.
    """

    f: int
    h: int
    w: int
    channels: int = LATENT_CHANNELS
    V: int = 1
    n: int = 2
    C: int = 32

    def __post_init__(self):
        for name in ("f", "h", "w", "channels", "V", "n", "C"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.h % self.n or self.w % self.n:
            raise ValueError(f"latent size {self.h}x{self.w} is not divisible by patch size {self.n}")

    @classmethod
    def from_dict(cls, d: dict) -> "LatentSpec":
        unknown = sorted(set(d) - {"f", "h", "w", "channels", "V", "n", "C"})
        if unknown:
            raise ValueError(f"unknown spec field(s): {', '.join(unknown)}")
        return cls(**d)

    @property
    def frames(self) -> int:
        """Latent frames after the reference frame is prepended."""
        return self.f + 1

    @property
    def tokens_per_frame(self) -> int:
        return (self.h // self.n) * (self.w // self.n)

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (TEMPORAL_STRIDE * self.f, SPATIAL_STRIDE * self.h, SPATIAL_STRIDE * self.w, 3)

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.f, self.h, self.w, self.channels)

    @property
    def target_shape(self) -> tuple[int, int, int, int, int]:
        """Multi-view output video: the reference frame plus ``4f`` generated frames per view."""
        return (self.V, TEMPORAL_STRIDE * self.f + 1, SPATIAL_STRIDE * self.h, SPATIAL_STRIDE * self.w, 3)

    @property
    def grid_shape(self) -> tuple[int, int, int, int]:
        return (self.V, self.frames, self.tokens_per_frame, self.C)


# --- latents and patches ----------------------------------------------------

def concat_condition_latents(ref, video, ref_pose, video_pose) -> np.ndarray:
    """Reference frame first along time, pose channels after content channels.

    ``ref`` and ``ref_pose`` are one-frame latents ``(1, h, w, c)``; ``video``
    and ``video_pose`` are ``(f, h, w, c)``.  Returns ``(f + 1, h, w, 2c)``.
    """
    ref, video, ref_pose, video_pose = (np.asarray(z, dtype=np.float64)
                                        for z in (ref, video, ref_pose, video_pose))
    for name, z in (("ref", ref), ("video", video), ("ref_pose", ref_pose), ("video_pose", video_pose)):
        if z.ndim != 4:
            raise ValueError(f"{name} must be (frames, h, w, channels), got {z.shape}")
    if ref.shape[0] != 1 or ref_pose.shape[0] != 1:
        raise ValueError("reference latents must have exactly one frame")
    if ref.shape != ref_pose.shape:
        raise ValueError(f"reference content {ref.shape} and pose {ref_pose.shape} shapes differ")
    if video.shape != video_pose.shape:
        raise ValueError(f"video content {video.shape} and pose {video_pose.shape} shapes differ")
    if ref.shape[1:] != video.shape[1:]:
        raise ValueError(f"reference {ref.shape[1:]} and video {video.shape[1:]} latents differ in size")
    content = np.concatenate([ref, video], axis=0)
    pose = np.concatenate([ref_pose, video_pose], axis=0)
    return np.concatenate([content, pose], axis=-1)


def patchify(z, n: int) -> np.ndarray:
    """Fold ``n x n`` spatial patches into channels: ``(F, h, w, c) -> (F, h/n * w/n, n*n*c)``.

    Tokens run row-major over patches; within a patch the layout is
    ``(row, col, channel)``.
    """
    z = np.asarray(z)
    F, h, w, c = z.shape
    if h % n or w % n:
        raise ValueError(f"size {h}x{w} is not divisible by patch size {n}")
    x = z.reshape(F, h // n, n, w // n, n, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(F, (h // n) * (w // n), n * n * c)


def unpatchify(tokens, n: int, h: int, w: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    F, P, D = tokens.shape
    c = D // (n * n)
    if P != (h // n) * (w // n) or D != n * n * c:
        raise ValueError("token block does not match the requested size")
    x = tokens.reshape(F, h // n, w // n, n, n, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(F, h, w, c)


@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, scale: float = 1.0) -> "Linear":
        bound = scale * np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.weight.shape[1]:
            raise ValueError(f"input width {x.shape[-1]} does not match layer width {self.weight.shape[1]}")
        return x @ self.weight.T + self.bias


def embed_latents(z0, spec: LatentSpec, proj: Linear) -> np.ndarray:
    """Patchify a conditioned latent and project each patch to ``C`` channels."""
    return proj(patchify(z0, spec.n))


# --- camera tokens ----------------------------------------------------------

def plucker_embedding(camera: CameraView, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Per-pixel ray map ``(6, H, W)``: channels ``(o x d, d)`` in world coordinates.

    Rays pass through integer pixel coordinates (the pixel-center convention
    of the renderer); ``d`` is unit length and ``o`` is the camera center.
    """
    H = camera.height if height is None else int(height)
    W = camera.width if width is None else int(width)
    K = np.asarray(camera.K, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("intrinsics matrix is singular")
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    rays_cam = pix @ np.linalg.inv(K).T
    d = rays_cam @ camera.rotation  # rows times R, i.e. R^T applied to each ray
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape)
    m = np.cross(o, d)
    return np.concatenate([m, d], axis=-1).transpose(2, 0, 1)


@dataclass
class CameraEncoder:
    """Strided patch encoder: each ``8n x 8n`` block of the 6-channel map is one token."""

    proj: Linear
    patch: int

    @classmethod
    def init(cls, spec: LatentSpec, rng: np.random.Generator, scale: float = 1.0) -> "CameraEncoder":
        p = SPATIAL_STRIDE * spec.n
        return cls(Linear.init(6 * p * p, spec.C, rng, scale), p)


def encode_camera_tokens(plucker, spec: LatentSpec, encoder: CameraEncoder) -> np.ndarray:
    """``(6, 8h, 8w)`` map to a ``(h/n * w/n, C)`` token block."""
    plucker = np.asarray(plucker, dtype=np.float64)
    want = (6, SPATIAL_STRIDE * spec.h, SPATIAL_STRIDE * spec.w)
    if plucker.shape != want:
        raise ValueError(f"Plücker map has shape {plucker.shape}, expected {want}")
    if encoder.patch != SPATIAL_STRIDE * spec.n:
        raise ValueError(f"encoder patch {encoder.patch} does not match {SPATIAL_STRIDE * spec.n}")
    blocks = patchify(plucker.transpose(1, 2, 0)[None], encoder.patch)[0]
    return encoder.proj(blocks)


# --- token layouts ----------------------------------------------------------

def _check_grid(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"token grid must be (view, frame, token, channel), got {x.shape}")
    return x


def rearrange_temporal(x) -> np.ndarray:
    """``(V, F, P, C) -> (V, F*P, C)``: one spatio-temporal sequence per view."""
    x = _check_grid(x)
    V, F, P, C = x.shape
    return x.reshape(V, F * P, C)


def inverse_temporal(seq, frames: int, tokens: int) -> np.ndarray:
    seq = np.asarray(seq)
    return seq.reshape(seq.shape[0], frames, tokens, seq.shape[-1])


def rearrange_view(x) -> np.ndarray:
    """``(V, F, P, C) -> (F, V*P, C)``: one spatio-view sequence per frame."""
    x = _check_grid(x)
    V, F, P, C = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(F, V * P, C)


def inverse_view(seq, views: int, tokens: int) -> np.ndarray:
    seq = np.asarray(seq)
    F = seq.shape[0]
    return np.ascontiguousarray(seq.reshape(F, views, tokens, seq.shape[-1]).transpose(1, 0, 2, 3))


def temporal_index(v: int, f: int, p: int, F: int, P: int) -> tuple[int, int]:
    """Position of grid element ``(v, f, p)`` in the temporal layout."""
    return v, f * P + p


def view_index(v: int, f: int, p: int, V: int, P: int) -> tuple[int, int]:
    """Position of grid element ``(v, f, p)`` in the view layout."""
    return f, v * P + p


# --- attention --------------------------------------------------------------

def softmax(x, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class AttentionWeights:
    """Single-head projections, each ``(C, C)`` acting as ``x @ W``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def init(cls, C: int, rng: np.random.Generator, scale: float = 1.0) -> "AttentionWeights":
        s = scale / np.sqrt(C)
        return cls(*(rng.normal(scale=s, size=(C, C)) for _ in range(4)))


def attention(seq, weights: AttentionWeights, return_weights: bool = False):
    """Full softmax self-attention over each sequence of ``seq`` ``(B, L, C)``."""
    seq = np.asarray(seq, dtype=np.float64)
    q, k, v = seq @ weights.wq, seq @ weights.wk, seq @ weights.wv
    att = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(seq.shape[-1]), axis=-1)
    out = (att @ v) @ weights.wo
    return (out, att) if return_weights else out


@dataclass
class DualAttentionWeights:
    temporal: AttentionWeights
    view: AttentionWeights

    @classmethod
    def init(cls, C: int, rng: np.random.Generator, scale: float = 1.0) -> "DualAttentionWeights":
        return cls(AttentionWeights.init(C, rng, scale), AttentionWeights.init(C, rng, scale))


def inject_camera(x, camera_tokens) -> np.ndarray:
    """Add each view's camera token block to every frame of that view."""
    x = _check_grid(x)
    cam = np.asarray(camera_tokens, dtype=np.float64)
    V, F, P, C = x.shape
    if cam.shape != (V, P, C):
        raise ValueError(f"camera tokens have shape {cam.shape}, expected {(V, P, C)}")
    return x + cam[:, None]


def dual_attention_block(x, camera_tokens, weights: DualAttentionWeights) -> np.ndarray:
    """Parallel spatio-temporal and spatio-view attention on one token grid.

    Camera tokens are added before attention; both branches read the same
    input, their outputs are averaged and added back to ``x``.
    """
    x = _check_grid(x).astype(np.float64)
    V, F, P, C = x.shape
    h = inject_camera(x, camera_tokens)
    t_out = inverse_temporal(attention(rearrange_temporal(h), weights.temporal), F, P)
    v_out = inverse_view(attention(rearrange_view(h), weights.view), V, P)
    return x + 0.5 * (t_out + v_out)


# --- shape audit ------------------------------------------------------------

def shape_ledger(spec: LatentSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Every tensor shape from pixels to attention layouts for ``spec``."""
    f, h, w, c, V, n, C = spec.f, spec.h, spec.w, spec.channels, spec.V, spec.n, spec.C
    P = spec.tokens_per_frame
    return [
        ("video pixels", spec.video_shape),
        ("video latent", (f, h, w, c)),
        ("pose latent", (f, h, w, c)),
        ("reference latent", (1, h, w, c)),
        ("reference pose latent", (1, h, w, c)),
        ("conditioned latent", (f + 1, h, w, 2 * c)),
        ("patches per frame", (f + 1, P, n * n * 2 * c)),
        ("tokens per view", (f + 1, P, C)),
        ("token grid", (V, f + 1, P, C)),
        ("Plücker map", (6, SPATIAL_STRIDE * h, SPATIAL_STRIDE * w)),
        ("camera tokens", (V, P, C)),
        ("spatio-temporal layout", (V, (f + 1) * P, C)),
        ("spatio-view layout", (f + 1, V * P, C)),
        ("multi-view output video", spec.target_shape),
    ]


def format_shape_ledger(spec: LatentSpec) -> str:
    rows = shape_ledger(spec)
    width = max(len(name) for name, _ in rows)
    lines = [f"spec: f={spec.f} h={spec.h} w={spec.w} channels={spec.channels} V={spec.V} n={spec.n} C={spec.C}"]
    lines += [f"{name.ljust(width)}  {' x '.join(str(s) for s in shape)}" for name, shape in rows]
    return "\n".join(lines)
