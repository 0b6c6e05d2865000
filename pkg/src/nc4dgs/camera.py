"""Pinhole camera description shared by the projector, rig builder and token kit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with OpenCV axes (x right, y down, z forward).

    ``K`` is the 3x3 intrinsic matrix in pixels and ``E`` the 4x4
    world-to-camera transform.  Pixel ``(i, j)`` (column, row) has its center
    at image coordinates ``(i, j)``.
    """

    K: np.ndarray
    E: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        E = np.asarray(self.E, dtype=np.float64)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise ValueError(f"bad camera matrix shapes K{K.shape} E{E.shape}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0:
            raise ValueError("K must be upper triangular with positive focal lengths")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)

    @property
    def rotation(self) -> np.ndarray:
        return self.E[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.E[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "E": self.E.tolist(),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        unknown = set(d) - {"K", "E", "width", "height"}
        if unknown:
            raise ValueError(f"unknown camera fields: {sorted(unknown)}")
        return cls(np.array(d["K"]), np.array(d["E"]), int(d["width"]), int(d["height"]))


def intrinsics_from_fov(fov_deg: float, width: int, height: int) -> np.ndarray:
    """Square-pixel intrinsics whose vertical field of view is ``fov_deg``."""
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"field of view must lie in (0, 180) degrees, got {fov_deg}")
    f = 0.5 * height / np.tan(np.deg2rad(fov_deg) / 2.0)
    return np.array([[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]])


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera 4x4 for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ center
    return E


def translate_camera(camera: CameraView, offset) -> CameraView:
    """Move the camera center by ``offset`` (world units) keeping its orientation."""
    E = camera.E.copy()
    E[:3, 3] = -camera.rotation @ (camera.center + np.asarray(offset, dtype=np.float64))
    return CameraView(camera.K, E, camera.width, camera.height)


def roll_camera(camera: CameraView, angle: float) -> CameraView:
    """Rotate the camera by ``angle`` radians about its optical axis."""
    c, s = np.cos(angle), np.sin(angle)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    E = np.eye(4)
    E[:3, :3] = Rz @ camera.rotation
    E[:3, 3] = Rz @ camera.translation
    return CameraView(camera.K, E, camera.width, camera.height)
