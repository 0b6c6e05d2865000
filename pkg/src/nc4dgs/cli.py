"""Command-line entry points.

    nc4dgs gen-scene   --config scene.json --out DIR
    nc4dgs fit         --scene DIR [--config train.json] --out CKPT [--threads N] [--coarse-only]
    nc4dgs render      --ckpt CKPT --rig rig.json --frames 0..7 --out DIR [--views 0,2]
    nc4dgs eval        --pred DIR --gt DIR [--out metrics.json]
    nc4dgs audit-shapes --spec spec.json

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
Every command writes ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import config_hash
from .deform import deform_cloud, load_checkpoint, normalized_time, save_checkpoint
from .frames import FrameSetError, match_frame_sets, read_frames, write_frames
from .metrics import MetricReport
from .rasterizer import render
from .scenegen import SceneConfig, build_scene, load_rig, load_scene, save_scene
from .trainer import (
    TrainConfig,
    coarse_fit,
    init_state,
    jsonl_logger,
    perturbed_cloud,
    progressive_fine_fit,
)
from .viewformer import LatentSpec, format_shape_ledger

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "Pillow"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _load_json(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _parse_config(cls, path):
    try:
        return cls.from_dict(_load_json(path))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_manifest(path, command: str, config, seed, inputs: dict, outputs: dict, timing: dict,
                   threads: int | None = None) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(config) if config is not None else None,
        "config": config if isinstance(config, dict) or config is None else _asdict(config),
        "seed": seed,
        "threads": threads,
        "versions": _versions(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timing_seconds": timing,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _asdict(cfg):
    return dataclasses.asdict(cfg)


# --- commands ---------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    config = _parse_config(SceneConfig, args.config)
    t0 = time.perf_counter()
    cloud, script, seq = build_scene(config, threads=args.threads)
    out = Path(args.out)
    save_scene(out, cloud, script, seq)
    timing = {"generate": time.perf_counter() - t0}
    write_manifest(out / "manifest.json", "gen-scene", config, config.seed,
                   {"config": args.config}, {"scene": out}, timing, args.threads)
    print(f"wrote {seq.num_views} views x {seq.num_frames} frames to {out}")
    return EXIT_OK


def final_loss(state, sequence, config) -> float:
    """Mean L1 of the fitted model over every training (view, frame) pair."""
    views = range(sequence.num_views) if config.train_views is None else config.train_views
    total = 0.0
    count = 0
    for t in range(sequence.num_frames):
        deformed, _ = deform_cloud(state.field, state.cloud, normalized_time(t, sequence.num_frames))
        for v in views:
            img = render(deformed, sequence.cameras[v], sequence.background, threads=config.threads).color
            total += float(np.mean(np.abs(img - sequence.images[v, t])))
            count += 1
    return total / count


def cmd_fit(args) -> int:
    config = _parse_config(TrainConfig, args.config)
    if args.threads is not None:
        config = dataclasses.replace(config, threads=args.threads)
    gt_cloud, script, seq = load_scene(args.scene)
    init = None
    if config.init == "perturbed_gt":
        if gt_cloud is None or script is None:
            raise ConfigError("init 'perturbed_gt' needs cloud.ply and motion.json in the scene directory")
        posed = script.apply(gt_cloud, normalized_time(seq.mid_frame, seq.num_frames))
        init = perturbed_cloud(posed, config.init_noise, np.random.default_rng(config.seed + 1))
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else ckpt.with_name(ckpt.name + ".log.jsonl")
    state = init_state(seq, config, init)
    meta = {"num_frames": seq.num_frames, "config": config.to_dict()}
    timing = {}
    status = EXIT_OK
    with open(log_path, "w") as fh:
        log = jsonl_logger(fh)
        try:
            t0 = time.perf_counter()
            coarse_fit(state, seq, config, log)
            timing["coarse"] = time.perf_counter() - t0
            if not args.coarse_only:
                t0 = time.perf_counter()
                progressive_fine_fit(state, seq, config, log)
                timing["fine"] = time.perf_counter() - t0
            meta["final_loss"] = final_loss(state, seq, config)
        except FloatingPointError as exc:
            # parameters are only written after a finite check, so the state is the last good one
            print(f"numeric failure: {exc}; wrote last good checkpoint", file=sys.stderr)
            meta["aborted"] = str(exc)
            status = EXIT_NUMERIC
    meta["iterations"] = state.iteration
    meta["coarse_only"] = bool(args.coarse_only)
    save_checkpoint(ckpt, state.cloud, state.field, meta)
    write_manifest(ckpt.with_name(ckpt.name + ".manifest.json"), "fit", config, config.seed,
                   {"scene": args.scene, "config": args.config}, {"checkpoint": ckpt, "log": log_path},
                   timing, config.threads)
    if status == EXIT_OK:
        print(f"final loss {meta['final_loss']:.8g} after {state.iteration} iterations; checkpoint {ckpt}")
    return status


def parse_frames(spec: str, num_frames: int) -> list[float]:
    """``"a..b"`` (inclusive integer range) or a comma list of frame times."""
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        try:
            a, b = int(lo), int(hi)
        except ValueError:
            raise ConfigError(f"bad frame range {spec!r}") from None
        if b < a:
            raise ConfigError(f"empty frame range {spec!r}")
        times = [float(t) for t in range(a, b + 1)]
    else:
        try:
            times = [float(x) for x in spec.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad frame list {spec!r}") from None
    if not times:
        raise ConfigError("no frames requested")
    bad = [t for t in times if not (0.0 <= t <= num_frames - 1)]
    if bad:
        raise ConfigError(f"frame times {bad} fall outside [0, {num_frames - 1}]; extrapolation is not supported")
    return times


def render_frames(cloud, field, cameras, times, num_frames, background, threads=1) -> np.ndarray:
    out = np.empty((len(cameras), len(times), cameras[0].height, cameras[0].width, 3))
    for j, t in enumerate(times):
        deformed, _ = deform_cloud(field, cloud, normalized_time(t, num_frames))
        for i, cam in enumerate(cameras):
            out[i, j] = render(deformed, cam, background, threads=threads).color
    return out


def cmd_render(args) -> int:
    cloud, field, meta = load_checkpoint(args.ckpt)
    rig = _load_json(args.rig)
    try:
        cams, info = load_rig(rig)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{args.rig}: invalid rig ({exc})") from None
    num_frames = int(meta.get("num_frames", info.get("num_frames", 1)))
    times = parse_frames(args.frames, num_frames)
    views = list(range(len(cams))) if args.views is None else [int(v) for v in args.views.split(",")]
    if any(v < 0 or v >= len(cams) for v in views):
        raise ConfigError(f"views {views} out of range for {len(cams)} cameras")
    background = np.asarray(info.get("background", (0.0, 0.0, 0.0)), dtype=np.float64)
    t0 = time.perf_counter()
    images = render_frames(cloud, field, [cams[v] for v in views], times, num_frames, background, args.threads)
    out = Path(args.out)
    write_frames(out, images, views=views, times=times)
    if args.npy:
        np.save(out / "frames.npy", images)
    write_manifest(out / "manifest.json", "render", {"frames": times, "views": views}, None,
                   {"checkpoint": args.ckpt, "rig": args.rig}, {"frames": out},
                   {"render": time.perf_counter() - t0}, args.threads)
    print(f"rendered {len(views)} views x {len(times)} times to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    match_frame_sets(args.pred, args.gt)
    pred, views, _ = read_frames(args.pred)
    gt, _, _ = read_frames(args.gt)
    report = MetricReport.compute(pred, gt, views)
    out = Path(args.out) if args.out else Path(args.pred) / "metrics.json"
    out.write_text(report.to_json())
    print(report.table())
    write_manifest(out.with_name("manifest.json") if not args.out else out.with_suffix(".manifest.json"),
                   "eval", None, None, {"pred": args.pred, "gt": args.gt}, {"metrics": out}, {})
    return EXIT_OK


def cmd_audit_shapes(args) -> int:
    try:
        spec = LatentSpec.from_dict(_load_json(args.spec))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from None
    text = format_shape_ledger(spec)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_manifest(Path(args.out).with_suffix(".manifest.json"), "audit-shapes", _asdict(spec), None,
                       {"spec": args.spec}, {"ledger": args.out}, {})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nc4dgs", description="Neighbor-constrained deformable Gaussian fitting.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic animated scene")
    g.add_argument("--config", help="scene JSON (defaults for any missing field)")
    g.add_argument("--out", required=True)
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_gen_scene)

    f = sub.add_parser("fit", help="coarse then progressive fine fit")
    f.add_argument("--scene", required=True)
    f.add_argument("--config", help="training JSON (defaults for any missing field)")
    f.add_argument("--out", required=True, help="checkpoint path")
    f.add_argument("--log", help="JSON-lines log path (default: CKPT.log.jsonl)")
    f.add_argument("--threads", type=int)
    f.add_argument("--coarse-only", action="store_true")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render a checkpoint at given frame times")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--rig", required=True)
    r.add_argument("--frames", required=True, help="'a..b' or comma-separated times such as 2.5")
    r.add_argument("--views", help="comma-separated rig camera indices (default: all)")
    r.add_argument("--out", required=True)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--npy", action="store_true", help="also save float frames as frames.npy")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of predicted frames against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", help="metrics JSON path (default: PRED/metrics.json)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit-shapes", help="print the latent/token shape ledger")
    a.add_argument("--spec", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit_shapes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FrameSetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
