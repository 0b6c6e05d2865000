import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nc4dgs.camera import CameraView, intrinsics_from_fov, look_at, roll_camera
from nc4dgs.gaussians import (
    LOWPASS,
    GaussianCloud,
    build_covariance,
    parse_ply,
    ply_bytes,
    project,
    project_cloud,
    random_cloud,
    read_ply,
    write_ply,
)
from oracles import project_one


def axis_camera(f=50.0, size=64):
    K = np.array([[f, 0, (size - 1) / 2], [0, f, (size - 1) / 2], [0, 0, 1]])
    return CameraView(K, np.eye(4), size, size)


def one(position, log_scale=(0.0, 0.0, 0.0), rotation=(1.0, 0.0, 0.0, 0.0)):
    return GaussianCloud([position], [rotation], [log_scale], [0.0], [[1.0, 1.0, 1.0]])


def test_covariance_examples():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [np.log(2), 0, 0]), np.diag([4.0, 1, 1]),
                               rtol=1e-15)


@given(arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1),
       arrays(np.float64, 3, elements=st.floats(-4, 1)))
def test_covariance_symmetric_psd(q, s):
    S = build_covariance(q, s)
    assert np.max(np.abs(S - S.T)) < 1e-12
    assert np.linalg.eigvalsh(S).min() >= -1e-9


def test_projection_on_axis_hits_principal_point():
    cam = axis_camera()
    p = project(one([0.0, 0.0, 3.0]), cam)
    np.testing.assert_allclose(p.mean2d, [cam.cx, cam.cy], atol=1e-12)
    assert p.depth == 3.0 and not p.culled


def test_isotropic_projection_scale():
    cam = axis_camera(f=60.0)
    sigma, d = 0.05, 2.0
    p = project(one([0.0, 0.0, d], log_scale=[np.log(sigma)] * 3), cam)
    expect = (60.0 * sigma / d) ** 2
    np.testing.assert_allclose(p.cov2d - LOWPASS * np.eye(2), expect * np.eye(2), rtol=1e-3, atol=1e-12)


def test_doubling_distance_halves_std():
    cam = axis_camera(f=60.0)
    s1 = project(one([0.0, 0.0, 2.0], log_scale=[np.log(0.05)] * 3), cam).cov2d[0, 0] - LOWPASS
    s2 = project(one([0.0, 0.0, 4.0], log_scale=[np.log(0.05)] * 3), cam).cov2d[0, 0] - LOWPASS
    assert np.sqrt(s2) / np.sqrt(s1) == pytest.approx(0.5, rel=1e-3)


def test_behind_near_plane_culled():
    assert project(one([0.0, 0.0, 0.005]), axis_camera()).culled
    assert project(one([0.0, 0.0, -1.0]), axis_camera()).culled


def test_lowpass_floor(rng):
    cam = axis_camera()
    cloud = random_cloud(50, rng, center=(0, 0, 3), extent=0.5, log_scale_range=(-9, -7))
    proj = project_cloud(cloud, cam)
    assert np.linalg.eigvalsh(proj.cov2d).min() >= LOWPASS - 1e-12


def test_matches_ewa_oracle(rng):
    K = intrinsics_from_fov(40, 48, 40)
    cam = CameraView(K, look_at((1.0, 0.5, 2.0), (0, 0, 0)), 48, 40)
    cloud = random_cloud(20, rng)
    proj = project_cloud(cloud, cam)
    for i in range(20):
        m, c, z = project_one(cloud.positions[i], cloud.rotations[i], cloud.log_scales[i], cam.K, cam.E)
        np.testing.assert_allclose(proj.mean2d[i], m, rtol=1e-12)
        np.testing.assert_allclose(proj.cov2d[i], c, rtol=1e-10, atol=1e-12)
        assert proj.depth[i] == pytest.approx(z, rel=1e-14)


@given(st.floats(-np.pi, np.pi))
def test_roll_equivariance(theta):
    cam = axis_camera()
    cloud = random_cloud(8, np.random.default_rng(5), center=(0, 0, 3), extent=0.4)
    a = project_cloud(cloud, cam)
    b = project_cloud(cloud, roll_camera(cam, theta))
    c, s = np.cos(theta), np.sin(theta)
    R2 = np.array([[c, -s], [s, c]])
    pp = np.array([cam.cx, cam.cy])
    np.testing.assert_allclose(b.mean2d - pp, (a.mean2d - pp) @ R2.T, atol=1e-6)
    np.testing.assert_allclose(b.cov2d, R2 @ a.cov2d @ R2.T, atol=1e-6)


def test_check_finite_names_index(rng):
    cloud = random_cloud(5, rng)
    cloud.log_scales[3, 1] = np.inf
    with pytest.raises(ValueError, match="Gaussian 3"):
        cloud.check_finite()


def test_ply_round_trip(tmp_path, rng):
    cloud = random_cloud(17, rng)
    write_ply(tmp_path / "c.ply", cloud)
    back = read_ply(tmp_path / "c.ply")
    for k, v in cloud.params().items():
        np.testing.assert_array_equal(back.params()[k], v.astype(np.float32).astype(np.float64))
    exact = parse_ply(ply_bytes(cloud, "double"))
    for k, v in cloud.params().items():
        np.testing.assert_array_equal(exact.params()[k], v)


def test_ply_header_layout(rng):
    data = ply_bytes(random_cloud(2, rng))
    header = data.split(b"end_header\n")[0].decode()
    assert "format binary_little_endian 1.0" in header
    for name in ("x", "y", "z", "rot_w", "rot_z", "log_scale_x", "opacity_logit", "r", "g", "b"):
        assert f"property float {name}\n" in header + "\n"


def test_ply_rejects_garbage():
    with pytest.raises(ValueError):
        parse_ply(b"not a ply")
