"""PNG frame directories laid out as ``view_VV/frame_TTT.png``.

Pixel values are stored as linear 8-bit RGB with no transfer curve.
"""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

VIEW_RE = re.compile(r"^view_(\d{2,})$")
FRAME_RE = re.compile(r"^frame_(\d{3,}(?:\.\d+)?)\.png$")


class FrameSetError(ValueError):
    """Frame directories that are missing, ragged or mismatched."""


def frame_name(t) -> str:
    """``frame_003.png`` for whole frames, ``frame_002.500.png`` for fractional times."""
    t = float(t)
    if t.is_integer():
        return f"frame_{int(t):03d}.png"
    return f"frame_{t:07.3f}.png"


def view_name(v: int) -> str:
    return f"view_{int(v):02d}"


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_frames(root, images, views=None, times=None) -> list[Path]:
    """Write ``images`` ``(V, T, H, W, 3)``; returns the written paths."""
    images = np.asarray(images)
    V, T = images.shape[:2]
    views = list(range(V)) if views is None else list(views)
    times = list(range(T)) if times is None else list(times)
    out = []
    for i, v in enumerate(views):
        d = Path(root) / view_name(v)
        d.mkdir(parents=True, exist_ok=True)
        for j, t in enumerate(times):
            p = d / frame_name(t)
            write_png(p, images[i, j])
            out.append(p)
    return out


def list_frames(root) -> dict[int, list[str]]:
    """Frame file names per view index found under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"frame directory not found: {root}")
    found: dict[int, list[str]] = {}
    for entry in sorted(os.listdir(root)):
        m = VIEW_RE.match(entry)
        if m and (root / entry).is_dir():
            names = sorted(f for f in os.listdir(root / entry) if FRAME_RE.match(f))
            found[int(m.group(1))] = names
    if not found:
        raise FrameSetError(f"no view_XX directories under {root}")
    return found


def read_frames(root) -> tuple[np.ndarray, list[int], list[str]]:
    """Load a complete ``(V, T, H, W, 3)`` stack; every view must hold the same frames."""
    found = list_frames(root)
    views = sorted(found)
    names = sorted(set().union(*found.values()))
    missing = [f"{view_name(v)}/{n}" for v in views for n in names if n not in found[v]]
    if missing:
        raise FrameSetError("missing frames: " + ", ".join(missing))
    if not names:
        raise FrameSetError(f"no frames under {root}")
    root = Path(root)
    stack = [[read_png(root / view_name(v) / n) for n in names] for v in views]
    shapes = {img.shape for row in stack for img in row}
    if len(shapes) != 1:
        raise FrameSetError(f"frames under {root} differ in size: {sorted(shapes)}")
    return np.asarray(stack), views, names


def match_frame_sets(pred_root, gt_root) -> None:
    """Raise listing every frame present in one tree but not the other."""
    pred, gt = list_frames(pred_root), list_frames(gt_root)
    pred_set = {(v, n) for v, ns in pred.items() for n in ns}
    gt_set = {(v, n) for v, ns in gt.items() for n in ns}
    problems = []
    for v, n in sorted(gt_set - pred_set):
        problems.append(f"missing in prediction: {view_name(v)}/{n}")
    for v, n in sorted(pred_set - gt_set):
        problems.append(f"missing in ground truth: {view_name(v)}/{n}")
    if problems:
        raise FrameSetError("frame sets differ:\n  " + "\n  ".join(problems))
