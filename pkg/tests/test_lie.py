import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpct.lie import (
    SERIES_ANGLE,
    Group,
    InjectivityError,
    LieElement,
    LieGaussian,
    ad,
    d_right_jacobian,
    d_right_jacobian_inv,
    exp_matrix,
    hat,
    perturb,
    pose_from_vector,
    pose_to_vector,
    right_jacobian,
    right_jacobian_inv,
    vee,
)


def _rot_norm(xi):
    return abs(xi[2]) if xi.shape[0] == 3 else np.linalg.norm(xi[3:])


def tangent(dof, max_rot=3.0, max_trans=5.0):
    def build(v):
        v = np.array(v)
        if dof == 3:
            v[2] = np.clip(v[2], -max_rot, max_rot)
        else:
            n = np.linalg.norm(v[3:])
            if n > max_rot:
                v[3:] *= max_rot / n
        return v

    return arrays(np.float64, dof, elements=st.floats(-max_trans, max_trans)).map(build)


any_tangent = st.one_of(tangent(3), tangent(6))


def fd_right_jacobian(xi, h=1e-6):
    T = LieElement.exp(xi)
    n = xi.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        plus = T.inverse() @ LieElement.exp(xi + e)
        minus = T.inverse() @ LieElement.exp(xi - e)
        out[:, i] = (plus.log() - minus.log()) / (2 * h)
    return out


def test_se2_exp_frozen_example():
    T = LieElement.exp([1.0, 0.0, np.pi / 2])
    assert np.allclose(T.translation, [2 / np.pi, 2 / np.pi])
    assert np.allclose(T.rotation, [[0.0, -1.0], [1.0, 0.0]])


def test_se3_pure_translation_and_rotation():
    T = LieElement.exp([1.0, 2.0, 3.0, 0.0, 0.0, 0.0])
    assert np.allclose(T.translation, [1, 2, 3]) and np.allclose(T.rotation, np.eye(3))
    R = LieElement.exp([0, 0, 0, 0, 0, np.pi / 2]).rotation
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]])


@settings(max_examples=200, deadline=None)
@given(any_tangent)
def test_exp_log_round_trip(xi):
    assert np.max(np.abs(LieElement.exp(xi).log() - xi)) < 1e-10


@settings(max_examples=100, deadline=None)
@given(any_tangent)
def test_right_jacobian_matches_finite_differences(xi):
    assume(_rot_norm(xi) < 2.9)
    assert np.max(np.abs(right_jacobian(xi) - fd_right_jacobian(xi))) < 1e-5


@settings(max_examples=100, deadline=None)
@given(any_tangent)
def test_inverse_jacobian_is_inverse(xi):
    assert np.allclose(right_jacobian(xi) @ right_jacobian_inv(xi), np.eye(xi.shape[0]), atol=1e-9)


@pytest.mark.parametrize("dof", [3, 6])
def test_closed_form_and_series_agree_at_switch(dof):
    rng = np.random.default_rng(dof)
    for _ in range(10):
        xi = rng.normal(size=dof)
        rot = slice(2, 3) if dof == 3 else slice(3, 6)
        xi[rot] *= SERIES_ANGLE / np.linalg.norm(xi[rot])
        below = xi.copy()
        below[rot] *= 1 - 1e-9
        above = xi.copy()
        above[rot] *= 1 + 1e-9
        assert np.allclose(right_jacobian(below), right_jacobian(above), atol=1e-12)
        assert np.allclose(right_jacobian_inv(below), right_jacobian_inv(above), atol=1e-12)


@pytest.mark.parametrize("scale", [0.0, 1e-12, 1e-7, 1e-4, 0.05])
@pytest.mark.parametrize("dof", [3, 6])
def test_small_angles_are_accurate(scale, dof):
    rng = np.random.default_rng(7)
    xi = rng.normal(size=dof)
    if dof == 3:
        xi[2] = scale
    else:
        xi[3:] *= scale / max(np.linalg.norm(xi[3:]), 1e-300)
    assert np.allclose(LieElement.exp(xi).log(), xi, atol=1e-12)
    assert np.allclose(right_jacobian(xi), fd_right_jacobian(xi), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(any_tangent, any_tangent)
def test_jacobian_derivatives_match_finite_differences(xi, u):
    assume(xi.shape == u.shape and _rot_norm(xi) < 2.5)
    h = 1e-6
    n = xi.shape[0]
    num_j = np.zeros((n, n))
    num_ji = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        num_j[:, i] = (right_jacobian(xi + e) @ u - right_jacobian(xi - e) @ u) / (2 * h)
        num_ji[:, i] = (right_jacobian_inv(xi + e) @ u - right_jacobian_inv(xi - e) @ u) / (2 * h)
    scale = max(1.0, np.linalg.norm(u))
    assert np.max(np.abs(d_right_jacobian(xi, u) - num_j)) < 1e-5 * scale
    assert np.max(np.abs(d_right_jacobian_inv(xi, u) - num_ji)) < 1e-5 * scale


@settings(max_examples=60, deadline=None)
@given(any_tangent, any_tangent)
def test_adjoint_identity(a, b):
    """T Exp(xi) T^-1 = Exp(Ad_T xi)."""
    assume(a.shape == b.shape)
    T = LieElement.exp(a)
    lhs = T @ LieElement.exp(b) @ T.inverse()
    rhs = LieElement.exp(T.adjoint() @ b)
    assert lhs.isclose(rhs, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(any_tangent)
def test_hat_vee_and_ad(xi):
    assert np.allclose(vee(hat(xi)), xi)
    other = np.arange(1.0, xi.shape[0] + 1.0)
    bracket = hat(xi) @ hat(other) - hat(other) @ hat(xi)
    assert np.allclose(vee(bracket), ad(xi) @ other, atol=1e-9)


def test_log_guard_near_pi():
    with pytest.raises(InjectivityError):
        LieElement.exp([0.0, 0.0, np.pi]).log()
    with pytest.raises(InjectivityError):
        LieElement.exp([0.0, 0.0, 0.0, 0.0, 0.0, np.pi]).log()
    # just inside the guard still works
    xi = np.array([0.3, -0.2, np.pi - 1e-6])
    assert np.allclose(LieElement.exp(xi).log(), xi, atol=1e-8)


def test_jacobian_pole_is_rejected():
    with pytest.raises(ValueError):
        right_jacobian([0.0, 0.0, 2 * np.pi])
    with pytest.raises(ValueError):
        right_jacobian_inv([0.0, 0.0, 0.0, 0.0, 0.0, 2 * np.pi])


def test_non_finite_tangent_rejected():
    with pytest.raises(ValueError):
        exp_matrix([np.nan, 0.0, 0.0])


def test_element_validation():
    with pytest.raises(ValueError):
        LieElement(Group.SE2, np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        LieElement(Group.SE3, np.eye(3))
    with pytest.raises(TypeError):
        LieElement.identity(Group.SE2) @ LieElement.identity(Group.SE3)


@settings(max_examples=80, deadline=None)
@given(any_tangent)
def test_pose_vector_round_trip(xi):
    T = LieElement.exp(xi)
    assert pose_from_vector(pose_to_vector(T), T.group).isclose(T, atol=1e-10)


def test_pose_vector_near_pi_rotation():
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    T = LieElement.exp(np.r_[0.1, 0.2, 0.3, (np.pi - 1e-8) * axis])
    assert pose_from_vector(pose_to_vector(T), Group.SE3).isclose(T, atol=1e-7)


def test_composition_stays_on_manifold():
    rng = np.random.default_rng(3)
    T = LieElement.identity(Group.SE3)
    for _ in range(5000):
        T = perturb(T, 0.05 * rng.normal(size=6))
    R = T.rotation
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-11


def test_lie_gaussian_sample_covariance():
    cov = np.diag([0.04, 0.01, 0.0025])
    g = LieGaussian(LieElement.exp([1.0, 2.0, 0.3]), cov)
    samples = g.sample(np.random.default_rng(0), 4000)
    eps = np.array([g.mean.between(s) for s in samples])
    emp = np.cov(eps.T)
    assert np.allclose(np.diag(emp), np.diag(cov), rtol=0.1)
    corr = emp / np.sqrt(np.outer(np.diag(emp), np.diag(emp)))
    assert np.max(np.abs(corr - np.eye(3))) < 0.1
