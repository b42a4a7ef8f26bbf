import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpct.chain import Knot, build_chain, solve_chain
from gpct.lti import discretize, transition, wnoa_model
from gpct.query import (
    dense_gp_oracle,
    interp_coeffs,
    interp_coeffs_kernel_form,
    query_many,
    query_solution,
)

from conftest import chain_problem, rel_err


def _with_knot(model, knots, prior, meas, tau):
    extra = Knot("tau", float(tau), knots[0].dim)
    sol = solve_chain(build_chain(model, list(knots) + [extra], prior, meas))
    i = sol.index_of("tau")
    return sol.means[i], sol.covs[i]


def test_kernel_form_uses_previous_knot_noise_block():
    """Psi = Q_{tau,k-1} A_{k,tau}^T Q_{k,k-1}^{-1} reproduces the interval form; Q_{tau,k} does not."""
    model = wnoa_model(np.diag([0.7, 1.9]))
    t0, tau, t1 = 0.3, 1.1, 2.0
    c = interp_coeffs(model, t0, tau, t1)
    lam, psi = interp_coeffs_kernel_form(model, t0, tau, t1)
    assert np.allclose(psi, c.Psi, atol=1e-13)
    assert np.allclose(lam, c.Lambda, atol=1e-13)
    # the alternative reading with the block from tau to the next knot
    q_alt = discretize(model, tau, t1).Q_disc
    q_whole = discretize(model, t0, t1).Q_disc
    psi_alt = q_alt @ transition(model, t1 - tau).T @ np.linalg.inv(q_whole)
    assert np.max(np.abs(psi_alt - c.Psi)) > 1e-2


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.01, 0.99), st.floats(0.05, 4.0))
def test_interp_coefficients_reproduce_mean_of_noise_free_motion(t0, frac, dt):
    """With no process noise the prior mean is exact: Lambda x0 + Psi Phi x0 = Phi(tau) x0."""
    model = wnoa_model(np.eye(1))
    tau = t0 + frac * dt
    c = interp_coeffs(model, t0, tau, t0 + dt)
    phi_full = transition(model, dt)
    phi_tau = transition(model, tau - t0)
    assert np.allclose(c.Lambda + c.Psi @ phi_full, phi_tau, atol=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_query_equals_explicit_knot(seed):
    rng = np.random.default_rng(seed)
    model, knots, prior, meas = chain_problem(rng, 8, 2)
    sol = solve_chain(build_chain(model, knots, prior, meas))
    times = [k.time for k in knots]
    taus = rng.uniform(times[0], times[-1], size=10)
    for tau in taus:
        if np.min(np.abs(np.asarray(times) - tau)) < 1e-6:
            continue
        q = query_solution(sol, model, tau)
        mean, cov = _with_knot(model, knots, prior, meas, tau)
        assert rel_err(q.density.mean, mean) < 1e-9
        assert rel_err(q.density.cov, cov) < 1e-9


def test_query_matches_dense_oracle_between_knots(rng):
    model, knots, prior, meas = chain_problem(rng, 6, 1)
    sol = solve_chain(build_chain(model, knots, prior, meas))
    taus = np.sort(rng.uniform(knots[0].time + 1e-3, knots[-1].time - 1e-3, size=7))
    oracle = dense_gp_oracle(model, prior, [k.time for k in knots], meas, taus)
    for tau, d in zip(taus, oracle):
        q = query_solution(sol, model, tau)
        assert rel_err(q.density.mean, d.mean) < 1e-9
        assert rel_err(q.density.cov, d.cov) < 1e-8


def test_query_at_knot_snaps(rng):
    model, knots, prior, meas = chain_problem(rng, 4, 1)
    sol = solve_chain(build_chain(model, knots, prior, meas))
    q = query_solution(sol, model, knots[2].time + 1e-12)
    assert q.snapped
    assert np.array_equal(q.density.mean, sol.means[2])


def test_extrapolation_needs_flag_and_grows_uncertainty(rng):
    model, knots, prior, meas = chain_problem(rng, 4, 1)
    sol = solve_chain(build_chain(model, knots, prior, meas))
    with pytest.raises(ValueError):
        query_solution(sol, model, knots[-1].time + 1.0)
    ahead = query_solution(sol, model, knots[-1].time + 1.0, extrapolate=True)
    behind = query_solution(sol, model, knots[0].time - 1.0, extrapolate=True)
    assert ahead.extrapolated and behind.extrapolated
    assert np.trace(ahead.density.cov) > np.trace(sol.covs[-1])
    assert np.trace(behind.density.cov) > np.trace(sol.covs[0])
    # forward extrapolation agrees with the dense oracle
    oracle = dense_gp_oracle(model, prior, [k.time for k in knots], meas, [knots[-1].time + 1.0])[0]
    assert rel_err(ahead.density.mean, oracle.mean) < 1e-9
    assert rel_err(ahead.density.cov, oracle.cov) < 1e-8


def test_query_many_is_ordered(rng):
    model, knots, prior, meas = chain_problem(rng, 3, 1)
    sol = solve_chain(build_chain(model, knots, prior, meas))
    taus = [knots[0].time, 0.5 * (knots[0].time + knots[1].time), knots[-1].time]
    out = query_many(sol, model, taus)
    assert [q.time for q in out] == pytest.approx(taus)


def test_interp_coeffs_rejects_outside_interval():
    model = wnoa_model(np.eye(1))
    with pytest.raises(ValueError):
        interp_coeffs(model, 0.0, 1.0, 1.0)
