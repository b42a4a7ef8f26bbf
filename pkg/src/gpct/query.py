"""Querying the linear trajectory posterior at arbitrary times.

Eliminating a query state x_tau from the two motion factors around it gives
the conditional p(x_tau | x_{k-1}, x_k) = N(eta + Lambda x_{k-1} + Psi x_k, Sigma);
convolving with the pairwise posterior of the bracketing knots yields the
marginal at tau in O(1). :func:`dense_gp_oracle` evaluates the same posterior
from the full kernel matrix and is only meant for verification.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .chain import ChainSolution, MeasurementFactor
from .gaussian import GaussianDensity
from .lti import LtiModel, discretize, transition

SNAP_TOL = 1e-9
DENSE_ORACLE_MAX_K = 50


@dataclass(frozen=True)
class InterpCoeffs:
    tau: float
    bracket: tuple
    Lambda: np.ndarray
    Psi: np.ndarray
    Sigma: np.ndarray
    eta: np.ndarray

    @property
    def gain(self) -> np.ndarray:
        return np.hstack([self.Lambda, self.Psi])

    def mean(self, x_prev: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        return self.eta + self.Lambda @ x_prev + self.Psi @ x_next


@dataclass(frozen=True)
class QueryResult:
    time: float
    density: GaussianDensity
    snapped: bool = False
    extrapolated: bool = False
    bracket: Optional[tuple] = None


def _inv(m):
    inv = np.linalg.inv(m)
    return 0.5 * (inv + inv.T)


def interp_coeffs(
    model: LtiModel, t_prev: float, tau: float, t_next: float, bracket: tuple = (None, None)
) -> InterpCoeffs:
    if not t_prev < tau < t_next:
        raise ValueError(f"query time {tau} is not strictly inside ({t_prev}, {t_next})")
    first = discretize(model, t_prev, tau)
    second = discretize(model, tau, t_next)
    q1_inv = _inv(first.Q_disc)
    a2t_q2_inv = second.Phi.T @ _inv(second.Q_disc)
    sigma = _inv(q1_inv + a2t_q2_inv @ second.Phi)
    sigma = 0.5 * (sigma + sigma.T)
    lam = sigma @ q1_inv @ first.Phi
    psi = sigma @ a2t_q2_inv
    eta = sigma @ (q1_inv @ first.v_disc - a2t_q2_inv @ second.v_disc)
    return InterpCoeffs(float(tau), tuple(bracket), lam, psi, sigma, eta)


def interp_coeffs_kernel_form(model: LtiModel, t_prev: float, tau: float, t_next: float):
    """(Lambda, Psi) written with the kernel blocks instead of the conditional covariance:

    Lambda = A_{tau,k-1} - Q_{tau,k-1} A_{k,tau}^T Q_{k,k-1}^{-1} A_{k,k-1}
    Psi    = Q_{tau,k-1} A_{k,tau}^T Q_{k,k-1}^{-1}
    """
    a_tau = transition(model, tau - t_prev)
    a_k_tau = transition(model, t_next - tau)
    q_tau = discretize(model, t_prev, tau).Q_disc
    whole = discretize(model, t_prev, t_next)
    qk_inv = _inv(whole.Q_disc)
    psi = q_tau @ a_k_tau.T @ qk_inv
    lam = a_tau - psi @ whole.Phi
    return lam, psi


def query(coeffs: InterpCoeffs, pair: GaussianDensity) -> GaussianDensity:
    """Marginal posterior at tau from the joint posterior of the bracketing knots."""
    g = coeffs.gain
    mean = coeffs.eta + g @ pair.mean
    cov = coeffs.Sigma + g @ pair.cov @ g.T
    return GaussianDensity(mean, 0.5 * (cov + cov.T))


def query_solution(solution: ChainSolution, model: LtiModel, tau: float, extrapolate: bool = False) -> QueryResult:
    times = solution.times
    k = int(np.argmin(np.abs(times - tau)))
    if abs(times[k] - tau) <= SNAP_TOL:
        return QueryResult(float(tau), solution.marginal(k), snapped=True)
    if tau > times[-1] or tau < times[0]:
        if not extrapolate:
            raise ValueError(f"query time {tau} is outside the knot span [{times[0]}, {times[-1]}]")
        if tau > times[-1]:
            blk = discretize(model, times[-1], tau)
            mean = blk.Phi @ solution.means[-1] + blk.v_disc
            cov = blk.Phi @ solution.covs[-1] @ blk.Phi.T + blk.Q_disc
        else:
            # run the transition backwards: x_0 = Phi x_tau + v + w
            blk = discretize(model, tau, times[0])
            phi_inv = np.linalg.inv(blk.Phi)
            mean = phi_inv @ (solution.means[0] - blk.v_disc)
            cov = phi_inv @ (solution.covs[0] + blk.Q_disc) @ phi_inv.T
        return QueryResult(float(tau), GaussianDensity(mean, 0.5 * (cov + cov.T)), extrapolated=True)
    k = int(np.searchsorted(times, tau, side="right"))
    bracket = (solution.keys[k - 1], solution.keys[k])
    coeffs = interp_coeffs(model, times[k - 1], tau, times[k], bracket)
    return QueryResult(float(tau), query(coeffs, solution.pair(k)), bracket=bracket)


def query_many(solution: ChainSolution, model: LtiModel, taus: Sequence[float], extrapolate: bool = False):
    return [query_solution(solution, model, float(t), extrapolate) for t in taus]


def dense_gp_oracle(
    model: LtiModel,
    prior: GaussianDensity,
    knot_times: Sequence[float],
    measurements: Sequence[MeasurementFactor],
    query_times: Sequence[float],
) -> list:
    """Posterior marginals at ``query_times`` from the dense kernel matrix.

    Builds P = A Q A^T (lifted transition matrix times block-diagonal noise)
    over the knot times and query times together, then conditions on all
    measurements in one shot. Measurements are matched to knots by time.
    """
    knot_times = np.asarray(knot_times, dtype=float)
    if len(knot_times) - 1 > DENSE_ORACLE_MAX_K:
        raise ValueError(f"dense oracle limited to K <= {DENSE_ORACLE_MAX_K}")
    t0 = knot_times[0]
    query_times = np.asarray(query_times, dtype=float)
    if np.any(query_times < t0):
        raise ValueError("query times must not precede the first knot")
    grid = np.unique(np.concatenate([knot_times, query_times]))
    n = model.n
    N = len(grid)
    # lifted prior: x = A (v + w), w ~ N(0, Q)
    A = np.zeros((N * n, N * n))
    Q = np.zeros((N * n, N * n))
    v = np.zeros(N * n)
    v[:n] = prior.mean
    Q[:n, :n] = prior.cov
    for i in range(N):
        for j in range(i + 1):
            A[i * n : (i + 1) * n, j * n : (j + 1) * n] = transition(model, grid[i] - grid[j])
        if i > 0:
            blk = discretize(model, grid[i - 1], grid[i])
            Q[i * n : (i + 1) * n, i * n : (i + 1) * n] = blk.Q_disc
            v[i * n : (i + 1) * n] = blk.v_disc
    x_prior = A @ v
    P_prior = A @ Q @ A.T

    def pos(t):
        i = int(np.argmin(np.abs(grid - t)))
        if abs(grid[i] - t) > SNAP_TOL:
            raise ValueError(f"time {t} is not on the oracle grid")
        return i

    rows = []
    ys = []
    Rs = []
    for m in measurements:
        t = m.time if m.time is not None else None
        if t is None:
            raise ValueError("the dense oracle needs time-stamped measurements")
        i = pos(t)
        Ci = np.zeros((m.C.shape[0], N * n))
        Ci[:, i * n : (i + 1) * n] = m.C
        rows.append(Ci)
        ys.append(m.y)
        Rs.append(m.R)
    out = []
    qi = [pos(t) for t in query_times]
    if rows:
        C = np.vstack(rows)
        y = np.concatenate(ys)
        R = np.zeros((len(y), len(y)))
        o = 0
        for r in Rs:
            R[o : o + r.shape[0], o : o + r.shape[0]] = r
            o += r.shape[0]
        S = C @ P_prior @ C.T + R
        c = cho_factor(S)
        gain_t = cho_solve(c, C @ P_prior)  # S^-1 C P
        x_post = x_prior + gain_t.T @ (y - C @ x_prior)
        P_post = P_prior - (C @ P_prior).T @ gain_t
    else:
        x_post, P_post = x_prior, P_prior
    for i in qi:
        sl = slice(i * n, (i + 1) * n)
        cov = P_post[sl, sl]
        out.append(GaussianDensity(x_post[sl], 0.5 * (cov + cov.T)))
    return out
