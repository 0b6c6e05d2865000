"""Time-conditioned deformation of a canonical Gaussian cloud.

A Gaussian at normalized time ``t`` is the canonical Gaussian plus offsets
predicted by a feature grid and a two-layer tanh head::

    z = grid(x) ++ enc_space(x) ++ enc_time(t)
    (d_pos, d_rot, d_opacity) = W2 tanh(W1 z + b1) + b2

where ``x`` is the canonical position mapped into the unit cube of the scene
box.  The head's last layer starts at zero, so a fresh field is the identity.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianCloud, parse_ply, ply_bytes
from .numerics import DiffLayer, grid_sample_trilinear, tanh_forward_backward

GRID_RES = 32
FEATURE_DIM = 16
SPACE_FREQS = 6
TIME_FREQS = 4
HIDDEN = 64
OUT_DIM = 8  # 3 position + 4 quaternion + 1 opacity logit

CHECKPOINT_MAGIC = b"NC4DCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PositionalEncoding:
    """Fourier features ``x -> (x, sin(2^k pi x), cos(2^k pi x))_{k<L}`` per coordinate."""

    num_frequencies: int

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.num_frequencies + 1)

    def _angles(self, x):
        freqs = np.pi * 2.0 ** np.arange(self.num_frequencies)
        return x[..., None] * freqs, freqs

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        ang, _ = self._angles(x)
        blocks = np.empty(x.shape + (2 * self.num_frequencies + 1,))
        blocks[..., 0] = x
        blocks[..., 1::2] = np.sin(ang)
        blocks[..., 2::2] = np.cos(ang)
        return blocks.reshape(x.shape[:-1] + (-1,))

    def backward(self, x, d_out) -> np.ndarray:
        """Gradient w.r.t. ``x`` given the gradient w.r.t. ``encode(x)``."""
        x = np.asarray(x, dtype=np.float64)
        ang, freqs = self._angles(x)
        d = np.asarray(d_out).reshape(x.shape + (2 * self.num_frequencies + 1,))
        return d[..., 0] + np.sum(
            d[..., 1::2] * freqs * np.cos(ang) - d[..., 2::2] * freqs * np.sin(ang), axis=-1
        )


def encode(enc: PositionalEncoding, x) -> np.ndarray:
    return enc.encode(x)


@dataclass
class DeformedCloud(GaussianCloud):
    """A cloud evaluated at normalized time ``time``."""

    time: float = 0.0


@dataclass
class DeformationField:
    grid: np.ndarray  # (R, R, R, d)
    layer1: DiffLayer
    layer2: DiffLayer
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    space_encoding: PositionalEncoding = field(default_factory=lambda: PositionalEncoding(SPACE_FREQS))
    time_encoding: PositionalEncoding = field(default_factory=lambda: PositionalEncoding(TIME_FREQS))

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("scene box must have positive extent on every axis")
        expected = self.grid.shape[3] + self.space_encoding.out_dim(3) + self.time_encoding.out_dim(1)
        if self.layer1.in_dim != expected or self.layer2.out_dim != OUT_DIM:
            raise ValueError("head layer dimensions do not match the grid and encodings")

    @classmethod
    def create(cls, bbox_min, bbox_max, rng: np.random.Generator, *, resolution: int = GRID_RES,
               feature_dim: int = FEATURE_DIM, hidden: int = HIDDEN, space_freqs: int = SPACE_FREQS,
               time_freqs: int = TIME_FREQS, grid_init: float = 0.1) -> "DeformationField":
        space = PositionalEncoding(space_freqs)
        time = PositionalEncoding(time_freqs)
        in_dim = feature_dim + space.out_dim(3) + time.out_dim(1)
        grid = rng.uniform(-grid_init, grid_init, size=(resolution,) * 3 + (feature_dim,))
        return cls(
            grid=grid,
            layer1=DiffLayer.init(in_dim, hidden, rng),
            layer2=DiffLayer.init(hidden, OUT_DIM, rng, zero=True),
            bbox_min=bbox_min,
            bbox_max=bbox_max,
            space_encoding=space,
            time_encoding=time,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "grid": self.grid,
            "w1": self.layer1.weight,
            "b1": self.layer1.bias,
            "w2": self.layer2.weight,
            "b2": self.layer2.bias,
        }

    def copy(self) -> "DeformationField":
        return DeformationField(
            grid=self.grid.copy(),
            layer1=DiffLayer(self.layer1.weight.copy(), self.layer1.bias.copy()),
            layer2=DiffLayer(self.layer2.weight.copy(), self.layer2.bias.copy()),
            bbox_min=self.bbox_min.copy(),
            bbox_max=self.bbox_max.copy(),
            space_encoding=self.space_encoding,
            time_encoding=self.time_encoding,
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, value in sorted(self.params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()

    def offsets(self, positions, t: float):
        """Raw head outputs (N, 8) for canonical ``positions`` at time ``t``, with backward."""
        if not np.isfinite(t) or t < 0.0 or t > 1.0:
            raise ValueError(f"normalized time must lie in [0, 1], got {t}")
        X = np.asarray(positions, dtype=np.float64)
        extent = self.bbox_max - self.bbox_min
        xn = (X - self.bbox_min) / extent
        res = np.array(self.grid.shape[:3]) - 1
        feat, grid_bw = grid_sample_trilinear(self.grid, xn * res)
        feat = np.atleast_2d(feat)
        ex = self.space_encoding.encode(xn)
        et = np.broadcast_to(self.time_encoding.encode(np.array([t])), (len(X), self.time_encoding.out_dim(1)))
        z = np.concatenate([feat, ex, et], axis=1)
        h_pre, bw1 = self.layer1.forward(z)
        h, bwt = tanh_forward_backward(h_pre)
        out, bw2 = self.layer2.forward(h)
        nf = feat.shape[1]
        ne = ex.shape[1]

        def backward(d_out):
            dW2, db2, dh = bw2(d_out)
            dW1, db1, dz = bw1(bwt(dh))
            d_grid, d_p = grid_bw(dz[:, :nf])
            d_xn = d_p * res + self.space_encoding.backward(xn, dz[:, nf:nf + ne])
            grads = {"grid": d_grid, "w1": dW1, "b1": db1, "w2": dW2, "b2": db2}
            return grads, d_xn / extent

        return out, backward


def deform_cloud(field: DeformationField, cloud: GaussianCloud, t: float):
    """Evaluate the deformed cloud at normalized time ``t``.

    Returns ``(deformed, backward)``; ``backward(grads)`` takes a dict of
    gradients w.r.t. the deformed cloud's parameters (any subset of the
    GaussianCloud field names) and returns ``(field_grads, cloud_grads)``.
    Position gradients may be passed for points only, e.g. from the neighbor
    loss.
    """
    out, head_bw = field.offsets(cloud.positions, t)
    q_raw = cloud.rotations + out[:, 3:7]
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q_hat = q_raw / q_norm
    deformed = DeformedCloud(
        positions=cloud.positions + out[:, :3],
        rotations=q_hat,
        log_scales=cloud.log_scales.copy(),
        opacity_logits=cloud.opacity_logits + out[:, 7],
        colors=cloud.colors.copy(),
        time=float(t),
    )

    def backward(grads: dict[str, np.ndarray]):
        n = len(cloud)
        zeros = lambda shape: np.zeros(shape)
        d_pos = grads.get("positions", zeros((n, 3)))
        d_qhat = grads.get("rotations", zeros((n, 4)))
        d_logit = grads.get("opacity_logits", zeros(n))
        d_qraw = (d_qhat - np.sum(d_qhat * q_hat, axis=1, keepdims=True) * q_hat) / q_norm
        d_out = np.concatenate([d_pos, d_qraw, d_logit[:, None]], axis=1)
        field_grads, d_canon_pos = head_bw(d_out)
        cloud_grads = {
            "positions": d_pos + d_canon_pos,
            "rotations": d_qraw,
            "log_scales": np.array(grads.get("log_scales", zeros((n, 3))), dtype=np.float64),
            "opacity_logits": np.array(d_logit, dtype=np.float64),
            "colors": np.array(grads.get("colors", zeros((n, 3))), dtype=np.float64),
        }
        return field_grads, cloud_grads

    return deformed, backward


def deformed_positions(field: DeformationField, cloud: GaussianCloud, t: float) -> np.ndarray:
    out, _ = field.offsets(cloud.positions, t)
    return cloud.positions + out[:, :3]


def normalized_time(frame: float, num_frames: int) -> float:
    """Frame index to [0, 1]; a single-frame sequence maps to 0."""
    return 0.0 if num_frames <= 1 else float(frame) / (num_frames - 1)


# --- checkpoint -------------------------------------------------------------

def _array_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def checkpoint_bytes(cloud: GaussianCloud, field: DeformationField, meta: dict | None = None) -> bytes:
    """Serialize canonical cloud + field into one little-endian blob.

    Layout: magic, uint32 version, uint32 header length, JSON header, then
    the PLY section (uint64 length + bytes) followed by raw float64 arrays
    in header order.
    """
    arrays = [("grid", field.grid), ("w1", field.layer1.weight), ("b1", field.layer1.bias),
              ("w2", field.layer2.weight), ("b2", field.layer2.bias)]
    header = {
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "bbox_min": field.bbox_min.tolist(),
        "bbox_max": field.bbox_max.tolist(),
        "space_freqs": field.space_encoding.num_frequencies,
        "time_freqs": field.time_encoding.num_frequencies,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    ply = ply_bytes(cloud, dtype="double")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<Q", len(ply)))
    buf.write(ply)
    for _, a in arrays:
        buf.write(_array_bytes(a))
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> tuple[GaussianCloud, DeformationField, dict]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a deformation checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (plen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    cloud = parse_ply(data[pos:pos + plen])
    pos += plen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    field = DeformationField(
        grid=arrays["grid"],
        layer1=DiffLayer(arrays["w1"], arrays["b1"]),
        layer2=DiffLayer(arrays["w2"], arrays["b2"]),
        bbox_min=header["bbox_min"],
        bbox_max=header["bbox_max"],
        space_encoding=PositionalEncoding(header["space_freqs"]),
        time_encoding=PositionalEncoding(header["time_freqs"]),
    )
    return cloud, field, header["meta"]


def save_checkpoint(path, cloud: GaussianCloud, field: DeformationField, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(cloud, field, meta))


def load_checkpoint(path) -> tuple[GaussianCloud, DeformationField, dict]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
