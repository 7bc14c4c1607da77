import numpy as np
import pytest
from conftest import psd3, rotation_vectors, unit_vectors, vec3
from hypothesis import given
from hypothesis import strategies as st

from pnec.geometry import (
    Camera,
    is_rotation,
    project,
    project_to_so3,
    propagate_cov,
    propagate_with_jacobian,
    pullback_cov_gradient,
    rotate_cov,
    rotation_angle,
    skew,
    so3_exp,
    so3_left_jacobian,
    so3_log,
    sphere_retract,
    tangent_basis,
    unproject,
    unproject_jacobian,
    vee,
)

CAM = Camera(720.0, 720.0, 620.0, 185.0)


# skew --------------------------------------------------------------------

def test_skew_zero():
    assert np.array_equal(skew(np.zeros(3)), np.zeros((3, 3)))


def test_skew_canonical():
    assert np.allclose(skew([1.0, 0, 0]) @ [0, 1.0, 0], [0, 0, 1.0])


@given(vec3, vec3)
def test_skew_matches_cross(u, v):
    S = skew(u)
    assert np.allclose(S @ v, np.cross(u, v), atol=1e-12)
    assert np.array_equal(S.T, -S)
    assert np.allclose(vee(S), u)


# exp / log ---------------------------------------------------------------

def test_exp_zero_is_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_z():
    assert np.allclose(so3_exp([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_exp_small_angle_branch_is_continuous():
    x = np.array([3e-9, -2e-9, 1e-9])
    ref = np.eye(3) + skew(x) + 0.5 * skew(x) @ skew(x)
    assert np.allclose(so3_exp(x), ref, atol=1e-20)


def test_log_identity():
    assert np.array_equal(so3_log(np.eye(3)), np.zeros(3))


def test_log_at_pi_about_x():
    R = np.diag([1.0, -1.0, -1.0])
    assert np.allclose(so3_log(R), [np.pi, 0, 0], atol=1e-12)


def test_log_at_pi_tie_takes_largest_diagonal_axis():
    # rotation by pi about (0, 1, 1)/sqrt2: (R + I)/2 has equal y and z diagonals
    R = so3_exp(np.pi * np.array([0.0, 1.0, 1.0]) / np.sqrt(2))
    w = so3_log(R)
    assert np.isclose(np.linalg.norm(w), np.pi, atol=1e-9)
    assert np.allclose(so3_exp(w), R, atol=1e-9)


@given(rotation_vectors())
def test_exp_log_roundtrip(x):
    assert np.allclose(so3_log(so3_exp(x)), x, atol=1e-9)


@given(rotation_vectors(max_angle=np.pi))
def test_log_exp_roundtrip(x):
    R = so3_exp(x)
    assert np.linalg.norm(so3_exp(so3_log(R)) - R) < 1e-9


@given(rotation_vectors(max_angle=np.pi))
def test_exp_is_rotation(x):
    R = so3_exp(x)
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12
    assert is_rotation(R)


def test_log_is_batched(rng):
    x = rng.normal(size=(4, 5, 3))
    x *= (np.pi - 0.1) * np.tanh(np.linalg.norm(x, axis=-1, keepdims=True)) / np.linalg.norm(x, axis=-1,
                                                                                               keepdims=True)
    assert np.allclose(so3_log(so3_exp(x)), x, atol=1e-9)


@given(rotation_vectors(max_angle=3.0), vec3)
def test_left_jacobian_first_order(x, d):
    d = 1e-7 * d / max(np.linalg.norm(d), 1e-12)
    lhs = so3_exp(x + d)
    rhs = so3_exp(so3_left_jacobian(x) @ d) @ so3_exp(x)
    assert np.linalg.norm(lhs - rhs) < 1e-12


def test_rotation_angle_matches_log_norm(rng):
    x = rng.normal(size=(50, 3))
    R = so3_exp(x)
    assert np.allclose(rotation_angle(R), np.linalg.norm(so3_log(R), axis=-1), atol=1e-12)


def test_project_to_so3_recovers_rotation(rng):
    R = so3_exp(rng.normal(size=3))
    assert np.allclose(project_to_so3(R + 1e-6 * rng.normal(size=(3, 3))), R, atol=1e-5)
    assert is_rotation(project_to_so3(rng.normal(size=(3, 3))), tol=1e-12)


# sphere chart -----------------------------------------------------------

@given(unit_vectors())
def test_tangent_basis_orthonormal(t):
    B = tangent_basis(t)
    assert np.allclose(B.T @ B, np.eye(2), atol=1e-12)
    assert np.allclose(t @ B, 0, atol=1e-12)


@given(unit_vectors(), st.floats(-1, 1), st.floats(-1, 1))
def test_sphere_retract_unit(t, a, b):
    out = sphere_retract(t, tangent_basis(t), np.array([a, b]))
    assert abs(np.linalg.norm(out) - 1) < 1e-12


# camera ------------------------------------------------------------------

def test_camera_rejects_nonpositive_focal():
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 0, 0)


def test_unproject_principal_point():
    assert np.allclose(unproject([CAM.cx, CAM.cy], CAM), [0, 0, 1], atol=1e-15)


def test_unproject_45_degree_ray():
    cam = Camera(720.0, 720.0, 0.0, 0.0)
    assert np.allclose(unproject([720.0, 0.0], cam), [np.sqrt(0.5), 0, np.sqrt(0.5)], atol=1e-15)


@given(st.floats(0, 1240), st.floats(0, 370))
def test_unproject_project_roundtrip(x, y):
    p = np.array([x, y])
    f = unproject(p, CAM)
    assert abs(np.linalg.norm(f) - 1) < 1e-12
    assert np.allclose(project(f, CAM), p, atol=1e-9)


@given(st.floats(0, 1240), st.floats(0, 370))
def test_unproject_jacobian_matches_finite_differences(x, y):
    p = np.array([x, y])
    J = unproject_jacobian(p, CAM)
    h = 1e-3
    fd = np.stack([(unproject(p + h * e, CAM) - unproject(p - h * e, CAM)) / (2 * h) for e in np.eye(2)], -1)
    assert np.allclose(J, fd, atol=1e-12)


# covariance propagation -------------------------------------------------

def test_propagate_zero():
    assert np.array_equal(propagate_cov([100.0, 50.0], np.zeros((2, 2)), CAM), np.zeros((3, 3)))


def test_propagate_at_principal_point():
    f = 720.0
    C = propagate_cov([CAM.cx, CAM.cy], np.eye(2), CAM)
    assert np.allclose(C, np.diag([1 / f**2, 1 / f**2, 0.0]), atol=1e-12)


@given(st.floats(0, 1240), st.floats(0, 370), psd3())
def test_propagate_is_symmetric_psd_rank2(x, y, A):
    p = np.array([x, y])
    cov2 = A[:2, :2] * 4.0
    C = propagate_cov(p, cov2, CAM)
    assert np.allclose(C, C.T, atol=1e-18)
    assert np.linalg.eigvalsh(C).min() >= -1e-12
    # nothing along the bearing
    f = unproject(p, CAM)
    assert abs(f @ C @ f) < 1e-9 * max(np.trace(C), 1e-30) + 1e-30


def test_propagate_matches_monte_carlo(rng):
    p = np.array([1000.0, 60.0])
    cov2 = np.array([[3.0, 0.7], [0.7, 1.0]])
    eta = rng.multivariate_normal(np.zeros(2), cov2, size=1_000_000)
    samples = unproject(p + eta, CAM)
    mc = np.cov(samples.T)
    C = propagate_cov(p, cov2, CAM)
    assert np.linalg.norm(C - mc) / np.linalg.norm(mc) < 0.02


def test_component_propagation_matches_matrix_form(rng):
    p = rng.uniform([0, 0], [1240, 370], size=(20, 2))
    A = rng.normal(size=(20, 2, 2))
    cov2 = A @ np.swapaxes(A, -1, -2)
    J = unproject_jacobian(p, CAM)
    assert np.allclose(propagate_with_jacobian(J, cov2), propagate_cov(p, cov2, CAM), rtol=0, atol=1e-20)


def test_pullback_is_adjoint_of_propagation(rng):
    p = rng.uniform([0, 0], [1240, 370], size=(10, 2))
    A = rng.normal(size=(10, 2, 2))
    cov2 = A @ np.swapaxes(A, -1, -2)
    G = rng.normal(size=(10, 3, 3))
    G = G + np.swapaxes(G, -1, -2)
    lhs = np.sum(G * propagate_cov(p, cov2, CAM), axis=(-2, -1))
    rhs = np.sum(pullback_cov_gradient(G, p, CAM) * cov2, axis=(-2, -1))
    assert np.allclose(lhs, rhs, rtol=1e-12)


@given(rotation_vectors(), psd3())
def test_rotate_cov_preserves_spectrum(x, S):
    R = so3_exp(x)
    out = rotate_cov(R, S)
    assert abs(np.trace(out) - np.trace(S)) < 1e-12 * max(1, np.trace(S))
    assert np.allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(S), atol=1e-12)
