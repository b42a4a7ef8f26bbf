import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpct.datasets import (
    gen_linear_wnoa,
    gen_se2_arc,
    gen_se2_landmarks,
    gen_se3_traj,
    gen_sinusoid_1d,
    make_rng,
    metrics,
    sample_lie_wnoa,
    state_error,
)
from gpct.gaussian import GaussianDensity
from gpct.lie import Group, LieElement, perturb
from gpct.lie_ct import BearingRangeFactor


@pytest.mark.parametrize("rate,duration", [(10.0, 1.0), (10.0, 20.0), (4.0, 2.5)])
def test_sinusoid_row_count(rate, duration):
    traj, log = gen_sinusoid_1d(rate, duration, 0.1, 0)
    assert len(traj.times) == len(log) == int(rate * duration) + 1
    assert np.allclose(traj.states[:, 0], np.sin(traj.times))
    assert np.allclose(traj.states[:, 1], np.cos(traj.times))


def test_sinusoid_rejects_empty_range():
    with pytest.raises(ValueError):
        gen_sinusoid_1d(10.0, 0.0, 0.1, 0)


def test_generators_are_deterministic():
    a = gen_se2_landmarks(n_knots=20, seed=9)
    b = gen_se2_landmarks(n_knots=20, seed=9)
    c = gen_se2_landmarks(n_knots=20, seed=10)
    assert [r.value.tolist() for r in a[1]] == [r.value.tolist() for r in b[1]]
    assert [r.value.tolist() for r in a[1]] != [r.value.tolist() for r in c[1]]


@pytest.mark.parametrize("seed", [-1, 2**64, 1.5, "7"])
def test_seed_validation(seed):
    with pytest.raises(ValueError):
        make_rng(seed)


def test_se2_arc_is_constant_twist():
    traj, log = gen_se2_arc(60, "none", 0)
    assert len(traj.times) == 60
    w = np.array([1.0, 0.0, 0.5])
    for (T1, _), (T2, _) in zip(traj.states, traj.states[1:]):
        assert np.allclose(T1.between(T2), 0.1 * w, atol=1e-12)
    assert all(r.sensor == "pose" for r in log)


def test_se3_velocity_is_body_rate():
    traj, _ = gen_se3_traj(30, "none", 0, dt=0.1)
    h = 1e-6
    # finite-difference body velocity of T(t) = Exp(xi(t))
    c1 = np.array([1.0, 0.2, 0.1, 0.05, 0.1, 0.3])
    c2 = np.array([0.1, -0.05, 0.02, 0.02, -0.01, 0.0])
    c3 = np.array([0.0, 0.01, 0.0, 0.0, 0.0, -0.005])
    xi = lambda t: c1 * t + c2 * t**2 + c3 * t**3
    for t, (T, w) in list(zip(traj.times, traj.states))[::7]:
        fd = (LieElement.exp(xi(t)).inverse() @ LieElement.exp(xi(t + h))).log() / h
        assert np.allclose(fd, w, atol=1e-5)


def test_landmark_measurements_are_consistent_with_truth():
    traj, log = gen_se2_landmarks(n_knots=30, seed=3, sd_bearing=1e-12, sd_range=1e-12)
    by_t = dict(zip(traj.times, traj.states))
    for r in log:
        T = by_t[r.time][0]
        assert np.allclose(BearingRangeFactor.predict(T, traj.landmarks[r.target]), r.value, atol=1e-9)
    assert max(sum(1 for r in log if r.time == t) for t in traj.times) == 3


def test_lie_wnoa_samples_have_prior_statistics():
    """Increments of the local variable have the WNOA covariance."""
    rng = make_rng(0)
    Qc = np.diag([0.5, 0.1, 0.3])
    w0 = np.array([1.0, 0.0, 0.2])
    ends = []
    for _ in range(3000):
        out = sample_lie_wnoa([0.0, 1.0], Qc, LieElement.identity(Group.SE2), w0, rng)
        ends.append(out[1][0].log())
    ends = np.array(ends)
    assert np.allclose(ends.mean(axis=0), w0, atol=0.05)
    assert np.allclose(np.var(ends, axis=0), np.diag(Qc) / 3.0, rtol=0.1)


def test_linear_wnoa_generator_shapes():
    prior = GaussianDensity(np.zeros(4), np.eye(4))
    traj, log = gen_linear_wnoa(11, 0.5, np.eye(2), 0.1, prior, 1, meas_every=5)
    assert traj.states.shape == (11, 4)
    assert [r.time for r in log] == [0.0, 2.5, 5.0]


def test_metrics_perfect_estimates():
    traj, _ = gen_se2_arc(10, "none", 0)
    covs = [np.eye(6)] * 10
    m = metrics(traj.states, covs, traj.states, traj.times, traj.times)
    assert m.rmse_translation == pytest.approx(0.0, abs=1e-14)
    assert m.rmse_rotation == pytest.approx(0.0, abs=1e-14)
    assert m.mean_nees == pytest.approx(0.0, abs=1e-20)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.5, 4.0))
def test_nees_scales_inversely_with_covariance(seed, factor):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(20, 2))
    est = truth + rng.normal(size=(20, 2)) * 0.1
    covs = [np.diag([0.01, 0.02])] * 20
    base = metrics(list(est), covs, list(truth)).mean_nees
    shrunk = metrics(list(est), [c / factor for c in covs], list(truth)).mean_nees
    assert shrunk == pytest.approx(factor * base, rel=1e-12)


def test_metrics_rejects_misaligned_times():
    x = [np.zeros(2)] * 3
    with pytest.raises(ValueError, match="aligned"):
        metrics(x, [np.eye(2)] * 3, x, [0.0, 1.0, 2.0], [0.0, 1.0, 2.5])


def test_state_error_convention():
    T = LieElement.exp([0.1, 0.2, 0.3])
    e = np.array([0.01, -0.02, 0.03])
    assert np.allclose(state_error(T, perturb(T, e)), e)
    assert np.allclose(state_error(np.array([1.0, 2.0]), np.array([1.5, 1.0])), [0.5, -1.0])
