"""Canonical Gaussian cloud, covariance construction and EWA projection."""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView
from .numerics import normalize_quat, quat_to_rotation, quat_to_rotation_backward

NEAR_PLANE = 0.01
LOWPASS = 0.3  # pixel^2 added to the projected covariance diagonal

PLY_PROPERTIES = (
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "log_scale_x", "log_scale_y", "log_scale_z",
    "opacity_logit",
    "r", "g", "b",
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GaussianCloud:
    """N anisotropic Gaussians in optimizer parameterization.

    Scales are stored as log standard deviations and opacities as logits so
    every field is unconstrained.  Colors are view-independent RGB.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{k: v[idx].copy() for k, v in self.params().items()})

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.log_scales)

    def check_finite(self) -> None:
        """Raise ``ValueError`` naming the first Gaussian with a non-finite parameter."""
        bad = np.zeros(len(self), dtype=bool)
        for name, value in self.params().items():
            bad |= ~np.isfinite(value.reshape(len(self), -1 if len(self) else 1)).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"Gaussian {i} has non-finite parameters")

    @staticmethod
    def concat(clouds) -> "GaussianCloud":
        clouds = list(clouds)
        return GaussianCloud(
            **{k: np.concatenate([c.params()[k] for c in clouds]) for k in clouds[0].params()}
        )


def build_covariance(rotation, log_scale) -> np.ndarray:
    """Sigma = R diag(exp(2 log_scale)) R^T for one Gaussian or a batch."""
    R = quat_to_rotation(rotation)
    var = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ij,...j,...kj->...ik", R, var, R)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    culled: bool = False


@dataclass
class Projection:
    """Batched projection of a cloud into one camera, with backward caches."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), low-pass floor included
    conic: np.ndarray  # (N, 3) entries (a, b, c) of cov2d^-1
    depth: np.ndarray  # (N,)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    valid: np.ndarray  # (N,) bool, False when culled by the near plane
    _cache: dict = field(default_factory=dict, repr=False)


def project_cloud(cloud: GaussianCloud, camera: CameraView) -> Projection:
    W = camera.rotation
    t = cloud.positions @ W.T + camera.translation
    z = t[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    fx, fy = camera.fx, camera.fy
    n = len(cloud)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * t[:, 0] / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * t[:, 1] / zs**2
    M = J @ W
    R = quat_to_rotation(cloud.rotations) if n else np.zeros((0, 3, 3))
    var = np.exp(2.0 * cloud.log_scales)
    Sigma = np.einsum("nij,nj,nkj->nik", R, var, R)
    cov = np.einsum("nij,njk,nlk->nil", M, Sigma, M)
    cov[:, 0, 0] += LOWPASS
    cov[:, 1, 1] += LOWPASS

    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
    mean2d = np.stack([fx * t[:, 0] / zs + camera.cx, fy * t[:, 1] / zs + camera.cy], axis=1)

    return Projection(
        mean2d=mean2d,
        cov2d=cov,
        conic=conic,
        depth=z,
        opacity=cloud.opacities,
        color=cloud.colors.copy(),
        valid=valid,
        _cache={"t": t, "zs": zs, "M": M, "R": R, "var": var, "Sigma": Sigma, "W": W,
                "fx": fx, "fy": fy, "rotations": cloud.rotations},
    )


def project(cloud_entry: GaussianCloud, camera: CameraView) -> ProjectedGaussian:
    """Project a single-Gaussian cloud; points at or behind the near plane come back culled."""
    if len(cloud_entry) != 1:
        raise ValueError("project() expects a one-element cloud; use project_cloud for batches")
    p = project_cloud(cloud_entry, camera)
    return ProjectedGaussian(
        mean2d=p.mean2d[0],
        cov2d=p.cov2d[0],
        depth=float(p.depth[0]),
        opacity=float(p.opacity[0]),
        color=p.color[0],
        culled=not bool(p.valid[0]),
    )


def projection_backward(proj: Projection, d_mean2d, d_conic, d_opacity, d_color) -> dict[str, np.ndarray]:
    """Chain screen-space gradients back to cloud parameters.

    ``d_conic`` holds gradients w.r.t. (a, b, c) where the splat exponent is
    ``-(a dx^2 + 2 b dx dy + c dy^2) / 2``.
    """
    c = proj._cache
    t, zs, M, R, var, Sigma, W = c["t"], c["zs"], c["M"], c["R"], c["var"], c["Sigma"], c["W"]
    fx, fy = c["fx"], c["fy"]
    valid = proj.valid

    a, b, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, cc], -1)], -2)
    GQ = np.stack(
        [np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
         np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)],
        -2,
    )
    d_cov = -Q @ GQ @ Q
    d_Sigma = np.einsum("nji,njk,nkl->nil", M, d_cov, M)
    d_M = 2.0 * d_cov @ M @ Sigma
    d_J = d_M @ W.T

    x, y = t[:, 0], t[:, 1]
    d_t = np.zeros_like(t)
    d_t[:, 0] = d_J[:, 0, 2] * (-fx / zs**2)
    d_t[:, 1] = d_J[:, 1, 2] * (-fy / zs**2)
    d_t[:, 2] = (
        d_J[:, 0, 0] * (-fx / zs**2)
        + d_J[:, 0, 2] * (2.0 * fx * x / zs**3)
        + d_J[:, 1, 1] * (-fy / zs**2)
        + d_J[:, 1, 2] * (2.0 * fy * y / zs**3)
    )
    d_t[:, 0] += d_mean2d[:, 0] * fx / zs
    d_t[:, 1] += d_mean2d[:, 1] * fy / zs
    d_t[:, 2] += -d_mean2d[:, 0] * fx * x / zs**2 - d_mean2d[:, 1] * fy * y / zs**2
    d_pos = d_t @ W

    d_R = 2.0 * d_Sigma @ R * var[:, None, :]
    d_log_scale = 2.0 * var * np.einsum("nji,njk,nki->ni", R, d_Sigma, R)
    d_rot = quat_to_rotation_backward(c["rotations"], d_R) if len(t) else np.zeros((0, 4))
    o = proj.opacity
    d_logit = d_opacity * o * (1.0 - o)

    out = {
        "positions": d_pos,
        "rotations": d_rot,
        "log_scales": d_log_scale,
        "opacity_logits": d_logit,
        "colors": np.asarray(d_color, dtype=np.float64).copy(),
    }
    for v in out.values():
        v[~valid] = 0.0
    return out


# --- PLY -------------------------------------------------------------------

def _cloud_table(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate(
        [
            cloud.positions,
            cloud.rotations,
            cloud.log_scales,
            cloud.opacity_logits[:, None],
            cloud.colors,
        ],
        axis=1,
    )


def ply_bytes(cloud: GaussianCloud, dtype: str = "float") -> bytes:
    """Binary little-endian PLY; ``dtype`` is ``"float"`` (32-bit) or ``"double"``."""
    np_type = {"float": "<f4", "double": "<f8"}[dtype]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property {dtype} {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    body = np.ascontiguousarray(_cloud_table(cloud).astype(np_type))
    return ("\n".join(header) + "\n").encode("ascii") + body.tobytes()


def write_ply(path: str | os.PathLike, cloud: GaussianCloud, dtype: str = "float") -> None:
    with open(path, "wb") as fh:
        fh.write(ply_bytes(cloud, dtype))


def parse_ply(data: bytes) -> GaussianCloud:
    stream = io.BytesIO(data)
    if stream.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    count = None
    props: list[tuple[str, str]] = []
    while True:
        line = stream.readline()
        if not line:
            raise ValueError("PLY header is not terminated")
        tokens = line.decode("ascii").split()
        if not tokens:
            continue
        if tokens[0] == "format" and tokens[1] != "binary_little_endian":
            raise ValueError(f"unsupported PLY format {tokens[1]}")
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                raise ValueError(f"unexpected PLY element {tokens[1]}")
            count = int(tokens[2])
        elif tokens[0] == "property":
            props.append((tokens[1], tokens[2]))
        elif tokens[0] == "end_header":
            break
    types = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
    try:
        dt = np.dtype([(name, types[kind]) for kind, name in props])
    except KeyError as exc:
        raise ValueError(f"unsupported PLY property type {exc}") from None
    missing = set(PLY_PROPERTIES) - set(dt.names)
    if missing:
        raise ValueError(f"PLY is missing properties {sorted(missing)}")
    rec = np.frombuffer(stream.read(count * dt.itemsize), dtype=dt, count=count)
    col = lambda *names: np.stack([rec[n].astype(np.float64) for n in names], axis=1)
    return GaussianCloud(
        positions=col("x", "y", "z"),
        rotations=col("rot_w", "rot_x", "rot_y", "rot_z"),
        log_scales=col("log_scale_x", "log_scale_y", "log_scale_z"),
        opacity_logits=rec["opacity_logit"].astype(np.float64),
        colors=col("r", "g", "b"),
    )


def read_ply(path: str | os.PathLike) -> GaussianCloud:
    with open(path, "rb") as fh:
        return parse_ply(fh.read())


def random_cloud(n: int, rng: np.random.Generator, center=(0.0, 0.0, 0.0), extent: float = 0.5,
                 log_scale_range=(-3.2, -2.4)) -> GaussianCloud:
    """Uniformly scattered Gaussians; handy for tests and cold starts."""
    return GaussianCloud(
        positions=np.asarray(center) + rng.uniform(-extent, extent, size=(n, 3)),
        rotations=normalize_quat(rng.normal(size=(n, 4))),
        log_scales=rng.uniform(*log_scale_range, size=(n, 3)),
        opacity_logits=rng.uniform(-0.5, 2.0, size=n),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
    )
