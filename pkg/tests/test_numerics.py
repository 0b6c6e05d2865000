import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nc4dgs.numerics import (
    DiffLayer,
    affine_forward_backward,
    grid_sample_trilinear,
    normalize_quat,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_rotation,
    quat_to_rotation_backward,
    tanh_forward_backward,
)
from oracles import finite_difference, quat_matrix

finite = st.floats(-3.0, 3.0, allow_nan=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


def test_identity_quaternion():
    np.testing.assert_array_equal(quat_to_rotation([1.0, 0.0, 0.0, 0.0]), np.eye(3))


def test_half_turn_about_x():
    np.testing.assert_allclose(quat_to_rotation([0.0, 1.0, 0.0, 0.0]), np.diag([1.0, -1.0, -1.0]), atol=0)


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        quat_to_rotation([0.0, 0.0, 0.0, 0.0])


@given(quats)
def test_rotation_is_orthonormal(q):
    R = quat_to_rotation(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(R, quat_matrix(q), atol=1e-12)


@given(quats)
def test_normalization_idempotent(q):
    n1 = normalize_quat(q)
    assert abs(np.linalg.norm(n1) - 1.0) < 1e-9
    np.testing.assert_allclose(normalize_quat(n1), n1, atol=1e-15)


@given(quats, quats)
def test_quaternion_product_composes_rotations(a, b):
    np.testing.assert_allclose(quat_to_rotation(quat_multiply(a, b)), quat_to_rotation(a) @ quat_to_rotation(b),
                               atol=1e-9)


def test_axis_angle():
    R = quat_to_rotation(quat_from_axis_angle([0, 0, 1], np.pi / 2))
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_rotation_backward_matches_fd(rng):
    q = rng.normal(size=4)
    dR = rng.normal(size=(3, 3))
    g = quat_to_rotation_backward(q[None], dR[None])[0]
    fd = finite_difference(lambda: float(np.sum(quat_to_rotation(q) * dR)), q, 1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_affine_identity():
    layer = DiffLayer(np.eye(2), np.zeros(2))
    y, bw = affine_forward_backward(layer, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(y, [1.0, 2.0])
    up = np.array([0.3, -0.7])
    np.testing.assert_array_equal(bw(up)[2], up)


def test_affine_scalar():
    layer = DiffLayer(np.array([[3.0]]), np.array([1.0]))
    y, bw = affine_forward_backward(layer, np.array([2.0]))
    assert y[0] == 7.0
    assert bw(np.array([1.0]))[2][0] == 3.0


def test_affine_dimension_mismatch():
    layer = DiffLayer(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        affine_forward_backward(layer, np.ones(3))


def test_affine_gradients_match_fd(rng):
    layer = DiffLayer.init(5, 4, rng)
    layer.bias[:] = rng.normal(size=4)
    x = rng.normal(size=(3, 5))
    up = rng.normal(size=(3, 4))
    _, bw = affine_forward_backward(layer, x)
    dW, db, dx = bw(up)
    f = lambda: float(np.sum(affine_forward_backward(layer, x)[0] * up))
    for analytic, arr in ((dW, layer.weight), (db, layer.bias), (dx, x)):
        fd = finite_difference(f, arr, 1e-4)
        assert np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-5


def test_two_layer_jvp(rng):
    l1, l2 = DiffLayer.init(4, 6, rng), DiffLayer.init(6, 2, rng)

    def net(x):
        h, _ = tanh_forward_backward(affine_forward_backward(l1, x)[0])
        return affine_forward_backward(l2, h)[0]

    x = rng.normal(size=4)
    v = rng.normal(size=4)
    # analytic JVP through the closures: J v = sum_k (e_k^T J) v
    h_pre, bw1 = affine_forward_backward(l1, x)
    h, bwt = tanh_forward_backward(h_pre)
    _, bw2 = affine_forward_backward(l2, h)
    J = np.stack([bw1(bwt(bw2(e)[2]))[2] for e in np.eye(2)])
    eps = 1e-4
    fd = (net(x + eps * v) - net(x - eps * v)) / (2 * eps)
    np.testing.assert_allclose(J @ v, fd, rtol=1e-4)


def test_trilinear_corner_and_constant(rng):
    grid = rng.normal(size=(3, 4, 5, 2))
    f, _ = grid_sample_trilinear(grid, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(f, grid[1, 2, 3])
    const = np.full((2, 2, 2, 3), 0.7)
    f, _ = grid_sample_trilinear(const, np.array([0.5, 0.5, 0.5]))
    np.testing.assert_allclose(f, 0.7, atol=1e-15)


def test_trilinear_rejects_nonfinite():
    with pytest.raises(ValueError):
        grid_sample_trilinear(np.zeros((2, 2, 2, 1)), np.array([np.nan, 0.0, 0.0]))


def test_trilinear_clamps_outside(rng):
    grid = rng.normal(size=(3, 3, 3, 2))
    f, bw = grid_sample_trilinear(grid, np.array([-1.0, 1.5, 5.0]))
    g, _ = grid_sample_trilinear(grid, np.array([0.0, 1.5, 2.0]))
    np.testing.assert_allclose(f, g)
    _, dp = bw(np.ones(2))
    assert dp[0] == 0.0 and dp[2] == 0.0


@given(arrays(np.float64, (4, 3), elements=st.floats(0.05, 2.95)))
def test_trilinear_gradients_match_fd(p):
    grid = np.random.default_rng(0).normal(size=(4, 4, 4, 3))
    up = np.array([0.5, -1.0, 2.0])
    f = lambda: float(np.sum(grid_sample_trilinear(grid, p)[0] * up))
    d_grid, d_p = grid_sample_trilinear(grid, p)[1](np.tile(up, (len(p), 1)))
    fd = finite_difference(f, p, 1e-6)
    # exact cell boundaries are kinks; skip coordinates that sit on one
    smooth = np.abs(p - np.round(p)) > 1e-4
    np.testing.assert_allclose(d_p[smooth], fd[smooth], rtol=1e-4, atol=1e-6)
    fd_grid = finite_difference(f, grid, 1e-6)
    np.testing.assert_allclose(d_grid, fd_grid, atol=1e-7)
