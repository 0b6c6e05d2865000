"""Synthetic animated Gaussian scenes with known ground truth.

Scenes are a torso blob with limb groups that swing rigidly about shoulder
pivots, watched by a horizontal orbit of cameras.  Ground-truth frames are
rendered with this package's own rasterizer, so a fit that recovers the
generating cloud and motion reproduces the frames exactly.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .camera import CameraView, intrinsics_from_fov, look_at
from .config import strict_from_dict
from .frames import FrameSetError, frame_name, read_frames, write_frames
from .gaussians import GaussianCloud, parse_ply, ply_bytes, read_ply, write_ply
from .numerics import normalize_quat, quat_from_axis_angle, quat_multiply, quat_to_rotation
from .rasterizer import render

__all__ = [
    "CameraView",
    "MultiViewSequence",
    "RigidGroup",
    "Impulse",
    "MotionScript",
    "SceneConfig",
    "build_scene",
    "make_orbit_rig",
    "make_articulated_scene",
    "render_ground_truth",
    "scene_bbox",
    "rig_dict",
    "load_rig",
    "save_scene",
    "load_scene",
]


def make_orbit_rig(num_views: int, radius: float = 2.5, fov_deg: float = 40.0, height: float = 0.0,
                   look_at_point=(0.0, 0.0, 0.0), width: int = 64, image_height: int = 64) -> list[CameraView]:
    """Cameras evenly spaced in azimuth on a horizontal circle around ``look_at_point``.

    Every camera center sits at distance ``radius`` from the target and at
    world height ``height``; azimuth 0 is on the +z side of the target.
    """
    if num_views < 1:
        raise ValueError("need at least one view")
    if radius <= 0 or fov_deg <= 0:
        raise ValueError("radius and field of view must be positive")
    target = np.asarray(look_at_point, dtype=np.float64)
    dy = height - target[1]
    if abs(dy) >= radius:
        raise ValueError("camera height offset must be smaller than the orbit radius")
    ring = np.sqrt(radius**2 - dy**2)
    K = intrinsics_from_fov(fov_deg, width, image_height)
    cams = []
    for v in range(num_views):
        phi = 2.0 * np.pi * v / num_views
        center = np.array([target[0] + ring * np.sin(phi), height, target[2] + ring * np.cos(phi)])
        cams.append(CameraView(K, look_at(center, target), width, image_height))
    return cams


@dataclass
class RigidGroup:
    """Members move rigidly: swing about ``pivot`` then translate along a spline."""

    indices: np.ndarray
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    swing_amplitude: float = 0.0  # radians
    swing_cycles: float = 1.0  # full periods over t in [0, 1]
    swing_phase: float = 0.0
    translation_knots: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.pivot = np.asarray(self.pivot, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.translation_knots = np.atleast_2d(np.asarray(self.translation_knots, dtype=np.float64))

    def angle(self, t: float) -> float:
        return self.swing_amplitude * np.sin(2.0 * np.pi * self.swing_cycles * t + self.swing_phase)

    def translation(self, t: float) -> np.ndarray:
        knots = self.translation_knots
        if len(knots) == 1:
            return knots[0].copy()
        times = np.linspace(0.0, 1.0, len(knots))
        if len(knots) == 2:
            return knots[0] + (knots[1] - knots[0]) * t
        return CubicSpline(times, knots, bc_type="natural")(t)

    def transform(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(quaternion, rotation matrix, translation) so that x' = R (x - pivot) + pivot + trans."""
        q = quat_from_axis_angle(self.axis, self.angle(t))
        return q, quat_to_rotation(q), self.translation(t)

    def to_dict(self) -> dict:
        return {
            "indices": self.indices.tolist(),
            "pivot": self.pivot.tolist(),
            "axis": self.axis.tolist(),
            "swing_amplitude": self.swing_amplitude,
            "swing_cycles": self.swing_cycles,
            "swing_phase": self.swing_phase,
            "translation_knots": self.translation_knots.tolist(),
        }


@dataclass
class Impulse:
    """One-frame displacement of a set of Gaussians (an injected outlier)."""

    indices: np.ndarray
    time: float
    offset: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.offset = np.asarray(self.offset, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"indices": self.indices.tolist(), "time": self.time, "offset": self.offset.tolist()}


@dataclass
class MotionScript:
    groups: list[RigidGroup]
    impulses: list[Impulse] = field(default_factory=list)

    def validate(self, n: int) -> None:
        seen = np.concatenate([g.indices for g in self.groups]) if self.groups else np.zeros(0, int)
        if len(seen) != n or not np.array_equal(np.sort(seen), np.arange(n)):
            raise ValueError("group index sets must partition the cloud")

    def apply(self, cloud: GaussianCloud, t: float) -> GaussianCloud:
        """Cloud posed at normalized time ``t``."""
        out = cloud.copy()
        for g in self.groups:
            q, R, trans = g.transform(t)
            idx = g.indices
            out.positions[idx] = (cloud.positions[idx] - g.pivot) @ R.T + g.pivot + trans
            out.rotations[idx] = quat_multiply(q, normalize_quat(cloud.rotations[idx]))
        for imp in self.impulses:
            if abs(t - imp.time) < 1e-9:
                out.positions[imp.indices] += imp.offset
        return out

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups],
                "impulses": [i.to_dict() for i in self.impulses]}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionScript":
        return cls(
            groups=[RigidGroup(**g) for g in d["groups"]],
            impulses=[Impulse(**i) for i in d.get("impulses", [])],
        )


@dataclass
class MultiViewSequence:
    """V x T grid of float RGB frames with their cameras."""

    images: np.ndarray  # (V, T, H, W, 3)
    cameras: list[CameraView]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fps: float = 8.0
    bbox: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 5 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be (V, T, H, W, 3), got {self.images.shape}")
        if self.images.shape[0] < 1 or self.images.shape[1] < 1:
            raise ValueError("need at least one view and one frame")
        if len(self.cameras) != self.images.shape[0]:
            raise ValueError("one camera per view is required")
        self.background = np.asarray(self.background, dtype=np.float64)

    @property
    def num_views(self) -> int:
        return self.images.shape[0]

    @property
    def num_frames(self) -> int:
        return self.images.shape[1]

    @property
    def mid_frame(self) -> int:
        return self.num_frames // 2

    def select_views(self, views) -> "MultiViewSequence":
        views = list(views)
        return MultiViewSequence(self.images[views], [self.cameras[v] for v in views],
                                 self.background, self.fps, self.bbox)


def _blob(rng, n, center, spread):
    return np.asarray(center) + rng.normal(size=(n, 3)) * np.asarray(spread)


def _limb(rng, n, start, end, jitter):
    s = rng.uniform(0.0, 1.0, size=(n, 1))
    return np.asarray(start) + s * (np.asarray(end) - np.asarray(start)) + rng.normal(size=(n, 3)) * jitter


def _resample(knots: np.ndarray, count: int) -> np.ndarray:
    """Piecewise-linear resampling of ``knots`` to ``count`` evenly spaced knots."""
    src = np.linspace(0.0, 1.0, len(knots))
    dst = np.linspace(0.0, 1.0, count)
    return np.stack([np.interp(dst, src, knots[:, a]) for a in range(knots.shape[1])], axis=1)


def make_articulated_scene(num_gaussians: int = 200, num_groups: int = 3, seed: int = 0,
                           swing_deg: float = 8.0, travel: float = 0.3, gap: float = 0.2, bob: float = 0.0):
    """A static torso (group 0) with ``num_groups - 1`` limbs attached at the shoulders.

    Limbs alternate sides, swing in the frontal plane by ``swing_deg`` and
    move along a vertical-and-outward translation spline of amplitude
    ``travel``.  ``gap`` pushes the limbs away from the torso and ``bob``
    adds a vertical spline translation to the whole figure.  Returns ``(cloud, script)`` posed at rest (t has not been
    applied).
    """
    if num_groups < 1 or num_groups > num_gaussians:
        raise ValueError("need 1 <= num_groups <= num_gaussians")
    rng = np.random.default_rng(seed)
    n_limbs = num_groups - 1
    torso_n = num_gaussians if n_limbs == 0 else max(1, num_gaussians // 2)
    limb_sizes = np.full(n_limbs, (num_gaussians - torso_n) // max(n_limbs, 1))
    limb_sizes[: (num_gaussians - torso_n) - limb_sizes.sum()] += 1

    pos = [_blob(rng, torso_n, (0.0, 0.0, 0.0), (0.14, 0.26, 0.09))]
    palette = [np.array([0.85, 0.35, 0.25]), np.array([0.25, 0.75, 0.35]), np.array([0.3, 0.45, 0.9]),
               np.array([0.9, 0.8, 0.3]), np.array([0.7, 0.3, 0.8])]
    cols = [np.clip(palette[0] + rng.normal(size=(torso_n, 3)) * 0.06, 0.02, 0.98)]
    groups = [RigidGroup(np.arange(torso_n))]
    start = torso_n
    for li, size in enumerate(limb_sizes):
        side = 1.0 if li % 2 == 0 else -1.0
        tier = li // 2
        shoulder = np.array([side * (0.2 + gap), 0.22 - 0.35 * tier, 0.0])
        hand = shoulder + np.array([side * 0.42, -0.18, 0.0])
        pos.append(_limb(rng, size, shoulder, hand, 0.025))
        cols.append(np.clip(palette[(li + 1) % len(palette)] + rng.normal(size=(size, 3)) * 0.06, 0.02, 0.98))
        groups.append(RigidGroup(
            indices=np.arange(start, start + size),
            pivot=shoulder,
            axis=np.array([0.0, 0.0, 1.0]),
            swing_amplitude=np.deg2rad(swing_deg) * side,
            swing_cycles=0.5,
            swing_phase=0.0,
            translation_knots=travel * np.array([[0.0, -0.5, 0.0], [side * 0.3, 0.2, 0.1],
                                                 [side * 0.4, 0.5, 0.0], [side * 0.1, 0.0, -0.1]]),
        ))
        start += size
    positions = np.concatenate(pos)
    if bob:
        knots = np.array([[0.0, 0.0, 0.0], [0.0, bob, 0.0], [0.0, 0.0, 0.0]])
        for g in groups:
            if len(g.translation_knots) == 1:
                g.translation_knots = np.repeat(g.translation_knots, 3, axis=0)
            g.translation_knots = g.translation_knots + _resample(knots, len(g.translation_knots))
    cloud = GaussianCloud(
        positions=positions,
        rotations=normalize_quat(rng.normal(size=(num_gaussians, 4))),
        log_scales=np.log(rng.uniform(0.035, 0.06, size=(num_gaussians, 3))),
        opacity_logits=rng.uniform(1.5, 3.0, size=num_gaussians),
        colors=np.concatenate(cols),
    )
    script = MotionScript(groups)
    script.validate(num_gaussians)
    return cloud, script


def scene_bbox(clouds, pad: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    pts = np.concatenate([c.positions for c in clouds])
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def render_ground_truth(cloud: GaussianCloud, script: MotionScript, rig: list[CameraView], T: int,
                        background=(0.0, 0.0, 0.0), threads: int = 1) -> MultiViewSequence:
    if T < 1:
        raise ValueError("need at least one frame")
    posed = [script.apply(cloud, 0.0 if T == 1 else t / (T - 1)) for t in range(T)]
    H, W = rig[0].height, rig[0].width
    images = np.empty((len(rig), T, H, W, 3))
    for t, c in enumerate(posed):
        for v, cam in enumerate(rig):
            images[v, t] = render(c, cam, background, threads=threads).color
    return MultiViewSequence(images, list(rig), np.asarray(background, dtype=np.float64),
                             bbox=scene_bbox(posed))


@dataclass(frozen=True)
class SceneConfig:
    """Everything needed to regenerate a synthetic scene directory."""

    num_gaussians: int = 200
    num_groups: int = 3
    seed: int = 0
    swing_deg: float = 8.0
    travel: float = 0.3
    gap: float = 0.2
    bob: float = 0.0
    num_views: int = 4
    radius: float = 2.5
    fov_deg: float = 40.0
    height: float = 0.0
    width: int = 64
    image_height: int = 64
    num_frames: int = 8
    fps: float = 8.0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("num_gaussians", "num_groups", "num_views", "width", "image_height", "num_frames"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.background) != 3:
            raise ValueError("background must have three components")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        cfg = strict_from_dict(cls, data)
        return dataclasses.replace(cfg, background=tuple(float(c) for c in cfg.background))


def build_scene(config: SceneConfig, threads: int = 1):
    """``(canonical cloud, script, sequence)`` for a scene config.

    The cloud is round-tripped through the single-precision PLY format
    first, so frames rendered here match frames rendered from the saved file.
    """
    cloud, script = make_articulated_scene(config.num_gaussians, config.num_groups, config.seed,
                                           swing_deg=config.swing_deg, travel=config.travel,
                                           gap=config.gap, bob=config.bob)
    cloud = parse_ply(ply_bytes(cloud))
    rig = make_orbit_rig(config.num_views, config.radius, config.fov_deg, config.height,
                         width=config.width, image_height=config.image_height)
    seq = render_ground_truth(cloud, script, rig, config.num_frames, config.background, threads)
    seq.fps = config.fps
    return cloud, script, seq


def rig_dict(seq: MultiViewSequence) -> dict:
    out = {
        "cameras": [c.to_dict() for c in seq.cameras],
        "background": seq.background.tolist(),
        "num_frames": seq.num_frames,
        "fps": seq.fps,
    }
    if seq.bbox is not None:
        out["bbox"] = [np.asarray(seq.bbox[0]).tolist(), np.asarray(seq.bbox[1]).tolist()]
    return out


def load_rig(data: dict) -> tuple[list[CameraView], dict]:
    cams = [CameraView.from_dict(c) for c in data["cameras"]]
    return cams, {k: v for k, v in data.items() if k != "cameras"}


def save_scene(root, cloud: GaussianCloud, script: MotionScript, seq: MultiViewSequence) -> list[Path]:
    """Write ``cloud.ply``, ``rig.json``, ``motion.json`` and PNG frames under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_ply(root / "cloud.ply", cloud)
    (root / "rig.json").write_text(json.dumps(rig_dict(seq), indent=2, sort_keys=True))
    (root / "motion.json").write_text(json.dumps(script.to_dict(), indent=2, sort_keys=True))
    return [root / "cloud.ply", root / "rig.json", root / "motion.json"] + write_frames(root, seq.images)


def load_scene(root) -> tuple[GaussianCloud | None, MotionScript | None, MultiViewSequence]:
    """Read a scene directory; the cloud and motion files are optional."""
    root = Path(root)
    rig_path = root / "rig.json"
    if not rig_path.is_file():
        raise FileNotFoundError(f"missing rig file: {rig_path}")
    cams, info = load_rig(json.loads(rig_path.read_text()))
    images, views, names = read_frames(root)
    if views != list(range(len(cams))):
        raise FrameSetError(f"frame views {views} do not match the {len(cams)} rig cameras")
    expected = [frame_name(t) for t in range(info.get("num_frames", len(names)))]
    if names != expected:
        missing = sorted(set(expected) - set(names))
        raise FrameSetError("missing frames: " + ", ".join(missing or names))
    bbox = info.get("bbox")
    seq = MultiViewSequence(images, cams, np.asarray(info.get("background", (0, 0, 0)), dtype=np.float64),
                            info.get("fps", 8.0),
                            (np.asarray(bbox[0]), np.asarray(bbox[1])) if bbox else None)
    cloud = read_ply(root / "cloud.ply") if (root / "cloud.ply").is_file() else None
    motion = root / "motion.json"
    script = MotionScript.from_dict(json.loads(motion.read_text())) if motion.is_file() else None
    return cloud, script, seq
