"""Image fidelity metrics for fitted sequences.

SSIM is the same computation that drives the D-SSIM training term, so the
number a fit is judged by and the number it optimizes cannot drift apart.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .losses import ssim_value

IDENTICAL = "identical"


def psnr(pred, gt, peak: float = 1.0):
    """Peak signal-to-noise ratio in dB, or ``"identical"`` when the images match exactly."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * np.log10(peak * peak / mse)


def ssim(pred, gt) -> float:
    return ssim_value(pred, gt)


def _finite(values) -> list[float]:
    return [v for v in values if v != IDENTICAL]


def mean_psnr(values):
    """Mean over finite entries; all-identical input stays ``"identical"``."""
    finite = _finite(values)
    if not finite:
        return IDENTICAL
    return float(np.mean(finite))


@dataclass
class MetricReport:
    """Per-(view, frame) PSNR and SSIM with per-view, per-frame and global means.

    Identical pairs are excluded from PSNR means; a mean over only identical
    pairs is itself ``"identical"``.
    """

    psnr: list[list]  # [view][frame]
    ssim: np.ndarray  # (V, T)
    views: list[int] | None = None

    @classmethod
    def compute(cls, preds, gts, views: list[int] | None = None) -> "MetricReport":
        preds = np.asarray(preds, dtype=np.float64)
        gts = np.asarray(gts, dtype=np.float64)
        if preds.shape != gts.shape or preds.ndim != 5:
            raise ValueError(f"expected matching (V, T, H, W, 3) stacks, got {preds.shape} and {gts.shape}")
        V, T = preds.shape[:2]
        p = [[psnr(preds[v, t], gts[v, t]) for t in range(T)] for v in range(V)]
        s = np.array([[ssim(preds[v, t], gts[v, t]) for t in range(T)] for v in range(V)])
        return cls(p, s, views)

    @property
    def num_views(self) -> int:
        return len(self.psnr)

    @property
    def num_frames(self) -> int:
        return len(self.psnr[0]) if self.psnr else 0

    def psnr_per_view(self) -> list:
        return [mean_psnr(row) for row in self.psnr]

    def psnr_per_frame(self) -> list:
        return [mean_psnr([row[t] for row in self.psnr]) for t in range(self.num_frames)]

    def psnr_global(self):
        return mean_psnr([x for row in self.psnr for x in row])

    def ssim_per_view(self) -> list[float]:
        return self.ssim.mean(axis=1).tolist()

    def ssim_per_frame(self) -> list[float]:
        return self.ssim.mean(axis=0).tolist()

    def ssim_global(self) -> float:
        return float(self.ssim.mean())

    def to_dict(self) -> dict:
        return {
            "views": self.views if self.views is not None else list(range(self.num_views)),
            "psnr": self.psnr,
            "ssim": self.ssim.tolist(),
            "psnr_per_view": self.psnr_per_view(),
            "psnr_per_frame": self.psnr_per_frame(),
            "psnr_global": self.psnr_global(),
            "ssim_per_view": self.ssim_per_view(),
            "ssim_per_frame": self.ssim_per_frame(),
            "ssim_global": self.ssim_global(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        """Plain-text table: one row per view, one PSNR/SSIM column pair per frame."""

        def fmt(p):
            return "   ident" if p == IDENTICAL else f"{p:8.2f}"

        views = self.views if self.views is not None else list(range(self.num_views))
        head = "view " + "".join(f"  f{t:03d} psnr/ssim" for t in range(self.num_frames)) + "      mean psnr/ssim"
        lines = [head]
        for i, v in enumerate(views):
            cells = "".join(f"{fmt(self.psnr[i][t])} / {self.ssim[i, t]:.4f}" for t in range(self.num_frames))
            lines.append(f"{v:4d} {cells}    {fmt(self.psnr_per_view()[i])} / {self.ssim_per_view()[i]:.4f}")
        lines.append(f"global psnr {fmt(self.psnr_global()).strip()}  ssim {self.ssim_global():.4f}")
        return "\n".join(lines)
