import json
import subprocess
import sys

import numpy as np
import pytest

from nc4dgs.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from nc4dgs.deform import deform_cloud, load_checkpoint, normalized_time
from nc4dgs.frames import read_png, to_uint8, write_frames
from nc4dgs.rasterizer import render
from nc4dgs.scenegen import SceneConfig, load_scene
from nc4dgs.trainer import TrainConfig, init_state, perturbed_cloud

SMALL_SCENE = {"num_gaussians": 40, "num_views": 2, "num_frames": 4, "width": 32, "image_height": 32}
SMALL_FIT = {"coarse_iters": 20, "fine_iters_per_step": 5, "grid_res": 8, "feature_dim": 4, "hidden": 16}


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "scene.json", SMALL_SCENE)
    assert main(["gen-scene", "--config", cfg, "--out", str(root / "scene")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def fitted(small_scene):
    cfg = write_json(small_scene / "fit.json", SMALL_FIT)
    ckpt = small_scene / "model.ckpt"
    assert main(["fit", "--scene", str(small_scene / "scene"), "--config", cfg, "--out", str(ckpt)]) == EXIT_OK
    return ckpt


def test_gen_scene_default_layout(tmp_path):
    assert main(["gen-scene", "--out", str(tmp_path / "s")]) == EXIT_OK
    views = sorted(p.name for p in (tmp_path / "s").iterdir() if p.is_dir())
    assert views == [f"view_{v:02d}" for v in range(4)]
    for v in views:
        assert sorted(p.name for p in (tmp_path / "s" / v).iterdir()) == [f"frame_{t:03d}.png" for t in range(8)]
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert manifest["command"] == "gen-scene" and manifest["seed"] == 0
    assert len(manifest["config_hash"]) > 0


def test_gen_scene_is_deterministic(tmp_path):
    cfg = write_json(tmp_path / "c.json", SMALL_SCENE)
    for name in ("a", "b"):
        assert main(["gen-scene", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "cloud.ply").read_bytes() == (tmp_path / "b" / "cloud.ply").read_bytes()
    assert (tmp_path / "a" / "view_01" / "frame_003.png").read_bytes() == \
        (tmp_path / "b" / "view_01" / "frame_003.png").read_bytes()


def test_gen_scene_full_orbit(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"num_views": 21, "num_frames": 1, "num_gaussians": 20,
                                           "width": 16, "image_height": 16})
    assert main(["gen-scene", "--config", cfg, "--out", str(tmp_path / "s")]) == EXIT_OK
    assert len([p for p in (tmp_path / "s").iterdir() if p.name.startswith("view_")]) == 21


def test_config_errors(tmp_path, capsys):
    bad = write_json(tmp_path / "bad.json", {"num_gaussianz": 10})
    assert main(["gen-scene", "--config", bad, "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    assert "num_gaussianz" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["gen-scene", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    neg = write_json(tmp_path / "neg.json", {"num_views": 0})
    assert main(["gen-scene", "--config", neg, "--out", str(tmp_path / "s")]) == EXIT_CONFIG


def test_fit_rejects_unknown_loss_weight(small_scene, tmp_path, capsys):
    cfg = write_json(tmp_path / "fit.json", {"weights": {"neighbour": 1.0}})
    rc = main(["fit", "--scene", str(small_scene / "scene"), "--config", cfg, "--out", str(tmp_path / "m.ckpt")])
    assert rc == EXIT_CONFIG
    assert "neighbour" in capsys.readouterr().err


def test_fit_missing_scene_is_io_error(tmp_path):
    assert main(["fit", "--scene", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m.ckpt")]) == EXIT_IO


def test_fit_missing_frame_is_io_error(small_scene, tmp_path, capsys):
    import shutil
    broken = tmp_path / "scene"
    shutil.copytree(small_scene / "scene", broken)
    (broken / "view_01" / "frame_002.png").unlink()
    assert main(["fit", "--scene", str(broken), "--out", str(tmp_path / "m.ckpt")]) == EXIT_IO
    assert "view_01/frame_002.png" in capsys.readouterr().err


def test_fit_writes_checkpoint_log_and_manifest(fitted):
    cloud, field, meta = load_checkpoint(fitted)
    assert meta["num_frames"] == 4 and meta["iterations"] == 20 + 3 * 5
    log = [json.loads(line) for line in fitted.with_name(fitted.name + ".log.jsonl").read_text().splitlines()]
    assert len(log) == meta["iterations"]
    assert {r["stage"] for r in log} == {"coarse", "fine"}
    manifest = json.loads(fitted.with_name(fitted.name + ".manifest.json").read_text())
    assert manifest["threads"] == 1 and "coarse" in manifest["timing_seconds"]


def test_coarse_only_keeps_field(small_scene, tmp_path):
    cfg_dict = dict(SMALL_FIT)
    cfg = write_json(tmp_path / "fit.json", cfg_dict)
    ckpt = tmp_path / "c.ckpt"
    rc = main(["fit", "--scene", str(small_scene / "scene"), "--config", cfg, "--out", str(ckpt), "--coarse-only"])
    assert rc == EXIT_OK
    _, field, meta = load_checkpoint(ckpt)
    gt, script, seq = load_scene(small_scene / "scene")
    config = TrainConfig.from_dict(cfg_dict)
    # the same initialization the command performs
    posed = script.apply(gt, normalized_time(seq.mid_frame, seq.num_frames))
    fresh = init_state(seq, config, perturbed_cloud(posed, config.init_noise, np.random.default_rng(config.seed + 1)))
    assert field.checksum() == fresh.field.checksum()
    assert meta["coarse_only"] and meta["iterations"] == 20


def test_render_training_view_matches_fit_time_render(small_scene, fitted, tmp_path):
    out = tmp_path / "r"
    rc = main(["render", "--ckpt", str(fitted), "--rig", str(small_scene / "scene" / "rig.json"),
               "--frames", "1..2", "--views", "1", "--out", str(out), "--npy"])
    assert rc == EXIT_OK
    cloud, field, _ = load_checkpoint(fitted)
    _, _, seq = load_scene(small_scene / "scene")
    frames = np.load(out / "frames.npy")
    for j, t in enumerate((1, 2)):
        deformed, _ = deform_cloud(field, cloud, normalized_time(t, 4))
        ref = render(deformed, seq.cameras[1], seq.background).color
        assert np.array_equal(frames[0, j], ref)
        assert np.array_equal(read_png(out / "view_01" / f"frame_{t:03d}.png"), to_uint8(ref) / 255.0)


def test_render_between_frames_and_novel_view(small_scene, fitted, tmp_path):
    rig = json.loads((small_scene / "scene" / "rig.json").read_text())
    from nc4dgs.camera import CameraView, roll_camera
    cam = CameraView.from_dict(rig["cameras"][0])
    rig["cameras"].append(roll_camera(cam, 10.0).to_dict())
    rig_path = write_json(tmp_path / "rig.json", rig)
    out = tmp_path / "r"
    assert main(["render", "--ckpt", str(fitted), "--rig", rig_path, "--frames", "2.5", "--out", str(out)]) == EXIT_OK
    assert (out / "view_02" / "frame_002.500.png").is_file()


def test_render_rejects_extrapolation(small_scene, fitted, tmp_path, capsys):
    rig = str(small_scene / "scene" / "rig.json")
    for frames in ("0..4", "-0.5", "3.01"):
        assert main(["render", "--ckpt", str(fitted), "--rig", rig, "--frames", frames,
                     "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "extrapolation" in capsys.readouterr().err
    assert main(["render", "--ckpt", str(fitted), "--rig", rig, "--frames", "0", "--views", "7",
                 "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_eval_identical_frames(small_scene, tmp_path, capsys):
    scene = str(small_scene / "scene")
    out = tmp_path / "m.json"
    assert main(["eval", "--pred", scene, "--gt", scene, "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["ssim_global"] == 1.0
    assert np.all(np.asarray(report["ssim"]) == 1.0)


def test_eval_mismatched_frames(small_scene, tmp_path, capsys):
    _, _, seq = load_scene(small_scene / "scene")
    write_frames(tmp_path / "pred", seq.images[:, :3])
    rc = main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(small_scene / "scene")])
    assert rc == EXIT_IO
    err = capsys.readouterr().err
    assert "view_00/frame_003.png" in err and "view_01/frame_003.png" in err


def test_audit_shapes(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json", {"V": 5, "f": 3, "h": 8, "w": 8})
    out = tmp_path / "ledger.txt"
    assert main(["audit-shapes", "--spec", spec, "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "token grid" in text and "5 x 4 x 16 x 32" in text
    assert out.read_text().strip() == text.strip()
    bad = write_json(tmp_path / "bad.json", {"V": 5, "f": 3, "h": 7, "w": 8})
    assert main(["audit-shapes", "--spec", bad]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    spec = write_json(tmp_path / "spec.json", {"f": 1, "h": 2, "w": 2})
    res = subprocess.run([sys.executable, "-m", "nc4dgs", "audit-shapes", "--spec", spec],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "conditioned latent" in res.stdout
    res = subprocess.run([sys.executable, "-m", "nc4dgs", "fit"], capture_output=True, text=True)
    assert res.returncode == 2
