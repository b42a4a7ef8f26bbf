"""Nonlinear continuous-time estimation on SE(2)/SE(3).

States are (pose T_k, body velocity w_k) at each knot. Between knots a local
variable gamma(t) = [xi(t); xi'(t)] with T(t) = T_{k-1} Exp(xi(t)) follows a
linear WNOA prior, which gives the binary motion factor
:class:`LieWnoaFactor`. Every factor linearizes to a
:class:`~gpct.gaussian.LinearFactor` over right perturbations, and
:func:`gauss_newton` solves the resulting sparse system.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .gaussian import LinearFactor, SingularInformationError, eliminate, fuse, is_spd
from .lie import (
    Group,
    InjectivityError,
    LieElement,
    d_right_jacobian,
    d_right_jacobian_inv,
    perturb,
    right_jacobian,
    right_jacobian_inv,
)
from .lti import wnoa_model, wnoa_q
from .query import SNAP_TOL, interp_coeffs

Values = dict


# ---------------------------------------------------------------- values


def tangent_dim(value) -> int:
    if isinstance(value, LieElement):
        return value.dof
    return int(np.asarray(value).shape[0])


def retract(value, delta: np.ndarray):
    if isinstance(value, LieElement):
        return perturb(value, delta)
    return np.asarray(value, dtype=float) + delta


def retract_all(values: Mapping, deltas: Mapping) -> Values:
    return {k: retract(v, deltas[k]) if k in deltas else v for k, v in values.items()}


@dataclass(frozen=True)
class LieKnot:
    pose_key: Hashable
    vel_key: Hashable
    time: float


# ---------------------------------------------------------------- factors


class DegenerateGeometryError(ValueError):
    """A measurement model is undefined at the current values."""


class NonlinearFactor:
    """e(x) ~ N(0, R). Subclasses provide ``keys``, :meth:`error` and :meth:`noise`."""

    keys: tuple = ()
    label: str = ""

    def error(self, values: Mapping) -> np.ndarray:
        raise NotImplementedError

    def noise(self, values: Mapping) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, values: Mapping) -> list:
        return numerical_jacobians(self.error, values, self.keys)

    def linearize(self, values: Mapping) -> LinearFactor:
        e = self.error(values)
        return LinearFactor(self.keys, tuple(self.jacobians(values)), -e, self.noise(values), label=self.label)

    def cost(self, values: Mapping) -> float:
        e = self.error(values)
        return 0.5 * float(e @ np.linalg.solve(self.noise(values), e))


def numerical_jacobians(fn, values: Mapping, keys: Sequence, step: float = 1e-6) -> list:
    """Central differences of ``fn`` under right perturbations of each key."""
    out = []
    for k in keys:
        d = tangent_dim(values[k])
        cols = []
        for i in range(d):
            delta = np.zeros(d)
            delta[i] = step
            plus = dict(values)
            minus = dict(values)
            plus[k] = retract(values[k], delta)
            minus[k] = retract(values[k], -delta)
            cols.append((fn(plus) - fn(minus)) / (2.0 * step))
        out.append(np.column_stack(cols))
    return out


class LieWnoaFactor(NonlinearFactor):
    """Motion prior between consecutive knots.

    e = [ Log(T1^-1 T2) - dt w1 ;  J(Log(T1^-1 T2))^-1 w2 - w1 ],  e ~ N(0, Q(dt)).
    """

    label = "motion"

    def __init__(self, prev: LieKnot, nxt: LieKnot, Qc: np.ndarray):
        self.prev = prev
        self.next = nxt
        self.dt = float(nxt.time - prev.time)
        if not self.dt > 0:
            raise ValueError(f"motion factor needs t_next > t_prev, got dt = {self.dt}")
        self.Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
        self.keys = (prev.pose_key, prev.vel_key, nxt.pose_key, nxt.vel_key)
        self._q = wnoa_q(self.Qc, self.dt)

    def _xi(self, values):
        T1, T2 = values[self.prev.pose_key], values[self.next.pose_key]
        try:
            return T1.between(T2)
        except InjectivityError as err:
            raise InjectivityError(
                f"interval {self.prev.pose_key!r} -> {self.next.pose_key!r} "
                f"(t = {self.prev.time} .. {self.next.time}): {err}"
            ) from None

    def error(self, values):
        xi = self._xi(values)
        w1 = np.asarray(values[self.prev.vel_key], dtype=float)
        w2 = np.asarray(values[self.next.vel_key], dtype=float)
        return np.concatenate([xi - self.dt * w1, right_jacobian_inv(xi) @ w2 - w1])

    def noise(self, values):
        return self._q

    def jacobians(self, values):
        xi = self._xi(values)
        w2 = np.asarray(values[self.next.vel_key], dtype=float)
        m = xi.shape[0]
        eye = np.eye(m)
        dxi_1 = -right_jacobian_inv(-xi)
        jinv = right_jacobian_inv(xi)
        dxi_2 = jinv
        D = d_right_jacobian_inv(xi, w2)
        z = np.zeros((m, m))
        return [
            np.vstack([dxi_1, D @ dxi_1]),
            np.vstack([-self.dt * eye, -eye]),
            np.vstack([dxi_2, D @ dxi_2]),
            np.vstack([z, jinv]),
        ]


class PosePrior(NonlinearFactor):
    """e = Log(Z^-1 T)."""

    label = "pose"

    def __init__(self, key, measured: LieElement, cov):
        self.keys = (key,)
        self.measured = measured
        self._r = np.atleast_2d(np.asarray(cov, dtype=float))
        self._zinv = measured.inverse()

    def error(self, values):
        return (self._zinv @ values[self.keys[0]]).log()

    def noise(self, values):
        return self._r

    def jacobians(self, values):
        return [right_jacobian_inv(self.error(values))]


class VectorPrior(NonlinearFactor):
    """e = S x - z on a vector-space variable (velocity, landmark). ``S`` defaults to identity."""

    label = "vector"

    def __init__(self, key, measured, cov, selection=None):
        self.keys = (key,)
        self.measured = np.atleast_1d(np.asarray(measured, dtype=float))
        self._r = np.atleast_2d(np.asarray(cov, dtype=float))
        self.selection = None if selection is None else np.atleast_2d(np.asarray(selection, dtype=float))

    def _S(self, n):
        return np.eye(n) if self.selection is None else self.selection

    def error(self, values):
        x = np.asarray(values[self.keys[0]], dtype=float)
        return self._S(x.shape[0]) @ x - self.measured

    def noise(self, values):
        return self._r

    def jacobians(self, values):
        return [self._S(np.asarray(values[self.keys[0]]).shape[0]).copy()]


def lateral_velocity_factor(vel_key, group: Group, weight: float = 1e-8) -> VectorPrior:
    """High-weight prior pinning body-frame lateral (and vertical) velocity to zero."""
    if group is Group.SE2:
        S = np.array([[0.0, 1.0, 0.0]])
    else:
        S = np.zeros((2, 6))
        S[0, 1] = S[1, 2] = 1.0
    return VectorPrior(vel_key, np.zeros(S.shape[0]), weight * np.eye(S.shape[0]), selection=S)


class BetweenFactor(NonlinearFactor):
    """e = Log(Z^-1 T1^-1 T2)."""

    label = "between"

    def __init__(self, key1, key2, measured: LieElement, cov):
        self.keys = (key1, key2)
        self.measured = measured
        self._zinv = measured.inverse()
        self._r = np.atleast_2d(np.asarray(cov, dtype=float))

    def error(self, values):
        T1, T2 = values[self.keys[0]], values[self.keys[1]]
        return (self._zinv @ T1.inverse() @ T2).log()

    def noise(self, values):
        return self._r

    def jacobians(self, values):
        T1, T2 = values[self.keys[0]], values[self.keys[1]]
        jinv = right_jacobian_inv(self.error(values))
        return [-jinv @ (T2.inverse() @ T1).adjoint(), jinv]


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


class BearingRangeFactor(NonlinearFactor):
    """Planar bearing/range to a point landmark, measured in the body frame of an SE(2) pose."""

    label = "bearing_range"

    def __init__(self, pose_key, landmark_key, bearing: float, rng: float, cov):
        self.keys = (pose_key, landmark_key)
        self.measured = np.array([bearing, rng], dtype=float)
        self._r = np.atleast_2d(np.asarray(cov, dtype=float))

    @staticmethod
    def predict(T: LieElement, landmark) -> np.ndarray:
        p = T.rotation.T @ (np.asarray(landmark, dtype=float) - T.translation)
        return np.array([np.arctan2(p[1], p[0]), np.hypot(p[0], p[1])])

    def _local(self, values):
        T = values[self.keys[0]]
        if T.group is not Group.SE2:
            raise TypeError("bearing/range factors are defined for SE(2) poses")
        return T, T.rotation.T @ (np.asarray(values[self.keys[1]], dtype=float) - T.translation)

    def error(self, values):
        _, p = self._local(values)
        if float(p @ p) < 1e-18:
            raise DegenerateGeometryError("bearing is undefined for a landmark at the sensor origin")
        pred = np.array([np.arctan2(p[1], p[0]), np.hypot(p[0], p[1])])
        e = pred - self.measured
        e[0] = wrap_angle(e[0])
        return e

    def noise(self, values):
        return self._r

    def jacobians(self, values):
        T, p = self._local(values)
        r2 = float(p @ p)
        r = np.sqrt(r2)
        if r < 1e-9:
            raise DegenerateGeometryError("bearing is undefined for a landmark at the sensor origin")
        dpred_dp = np.array([[-p[1] / r2, p[0] / r2], [p[0] / r, p[1] / r]])
        dp_dpose = np.array([[-1.0, 0.0, p[1]], [0.0, -1.0, -p[0]]])
        return [dpred_dp @ dp_dpose, dpred_dp @ T.rotation.T]


class RangeFactor(NonlinearFactor):
    """Euclidean range from a pose origin to a point landmark (SE(2) or SE(3))."""

    label = "range"

    def __init__(self, pose_key, landmark_key, rng: float, sigma: float):
        self.keys = (pose_key, landmark_key)
        self.measured = float(rng)
        self._r = np.array([[sigma * sigma]])

    def error(self, values):
        T = values[self.keys[0]]
        d = np.asarray(values[self.keys[1]], dtype=float) - T.translation
        return np.array([np.linalg.norm(d) - self.measured])

    def noise(self, values):
        return self._r

    def jacobians(self, values):
        T = values[self.keys[0]]
        d = np.asarray(values[self.keys[1]], dtype=float) - T.translation
        r = np.linalg.norm(d)
        if r < 1e-9:
            raise DegenerateGeometryError("range Jacobian is undefined at zero range")
        u = d / r
        nt = d.shape[0]
        jp = np.zeros((1, T.dof))
        jp[0, :nt] = -u @ T.rotation
        return [jp, u[None, :]]


# ---------------------------------------------------------------- graph + solver


@dataclass
class NonlinearGraph:
    factors: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    cache: object = None  # shared interpolation cache of a reduced graph

    def add(self, factor: NonlinearFactor) -> None:
        self.factors.append(factor)

    def keys(self) -> list:
        return list(self.values)

    def validate(self, values: Optional[Mapping] = None) -> None:
        values = self.values if values is None else values
        for f in self.factors:
            missing = [k for k in f.keys if k not in values]
            if missing:
                raise KeyError(f"factor {type(f).__name__} references key(s) without a value: {missing}")

    def cost(self, values: Optional[Mapping] = None) -> float:
        values = self.values if values is None else values
        return float(sum(f.cost(values) for f in self.factors))


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 100
    rel_tol: float = 1e-8
    abs_tol: float = 1e-24
    damping: str = "gn"  # "gn" starts undamped, "lm" starts at lambda_init
    lambda_init: float = 1e-6
    lambda_factor: float = 10.0
    max_rejections: int = 12

    def __post_init__(self):
        if self.damping not in ("gn", "lm"):
            raise ValueError("damping must be 'gn' or 'lm'")
        if self.max_iterations < 0 or self.rel_tol < 0:
            raise ValueError("iteration limits must be non-negative")


def _layout(values: Mapping, keys: Sequence):
    dims = [tangent_dim(values[k]) for k in keys]
    off = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    return {k: i for i, k in enumerate(keys)}, off


def assemble_linear(linear: Sequence[LinearFactor], keys: Sequence, off: np.ndarray, pos: Mapping):
    """Sparse Gauss-Newton system (H^T R^-1 H, H^T R^-1 b) from linearized factors."""
    rows, cols, data = [], [], []
    vec = np.zeros(off[-1])
    for f in linear:
        q = f.to_quadratic()
        gi = np.concatenate([np.arange(off[pos[k]], off[pos[k] + 1]) for k in f.keys])
        r, c = np.meshgrid(gi, gi, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        data.append(q.info.ravel())
        np.add.at(vec, gi, q.vec)
    n = off[-1]
    if not rows:
        return sp.csc_matrix((n, n)), vec
    info = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsc()
    return info, vec


def _factorize(info: sp.spmatrix, keys: Sequence, off: np.ndarray):
    diag = info.diagonal()
    bad = []
    for i, k in enumerate(keys):
        blk = info[off[i] : off[i + 1], off[i] : off[i + 1]].toarray()
        if not np.any(diag[off[i] : off[i + 1]]) or not is_spd(0.5 * (blk + blk.T)):
            bad.append(k)
    if bad:
        raise SingularInformationError(bad, "information matrix is singular")
    try:
        return splu(sp.csc_matrix(info), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError:
        raise SingularInformationError(list(keys), "information matrix is singular") from None


class LaplaceCovariance:
    """Blocks of the inverse information matrix, computed on demand from one factorization."""

    def __init__(self, info: sp.spmatrix, keys: Sequence, off: np.ndarray):
        self.keys = list(keys)
        self.off = off
        self.pos = {k: i for i, k in enumerate(self.keys)}
        self.info = info
        self._lu = _factorize(info, self.keys, off)

    def _idx(self, keys):
        return np.concatenate([np.arange(self.off[self.pos[k]], self.off[self.pos[k] + 1]) for k in keys])

    def joint(self, keys: Sequence) -> np.ndarray:
        idx = self._idx(keys)
        rhs = np.zeros((self.off[-1], len(idx)))
        rhs[idx, np.arange(len(idx))] = 1.0
        cols = self._lu.solve(rhs)
        out = cols[idx]
        return 0.5 * (out + out.T)

    def marginal(self, key) -> np.ndarray:
        return self.joint([key])

    def marginals(self, keys: Optional[Sequence] = None, batch: int = 512) -> dict:
        keys = self.keys if keys is None else list(keys)
        out = {}
        chunk: list = []
        width = 0

        def flush():
            if not chunk:
                return
            idx = self._idx(chunk)
            rhs = np.zeros((self.off[-1], len(idx)))
            rhs[idx, np.arange(len(idx))] = 1.0
            cols = self._lu.solve(rhs)
            o = 0
            for k in chunk:
                d = self.off[self.pos[k] + 1] - self.off[self.pos[k]]
                blk = cols[self.off[self.pos[k]] : self.off[self.pos[k] + 1], o : o + d]
                out[k] = 0.5 * (blk + blk.T)
                o += d

        for k in keys:
            chunk.append(k)
            width += self.off[self.pos[k] + 1] - self.off[self.pos[k]]
            if width >= batch:
                flush()
                chunk, width = [], 0
        flush()
        return out


@dataclass
class NonlinearSolution:
    values: dict
    cost_trace: list
    converged: bool
    iterations: int
    covariance: Optional[LaplaceCovariance] = None
    timing: dict = field(default_factory=dict)
    message: str = ""

    @property
    def cost(self) -> float:
        return self.cost_trace[-1]

    def marginal(self, key) -> np.ndarray:
        return self.covariance.marginal(key)

    def joint(self, keys) -> np.ndarray:
        return self.covariance.joint(keys)


def linearize_graph(factors: Sequence[NonlinearFactor], values: Mapping) -> list:
    return [f.linearize(values) for f in factors]


def laplace(factors: Sequence[NonlinearFactor], values: Mapping, keys: Optional[Sequence] = None) -> LaplaceCovariance:
    keys = list(values) if keys is None else list(keys)
    pos, off = _layout(values, keys)
    info, _ = assemble_linear(linearize_graph(factors, values), keys, off, pos)
    return LaplaceCovariance(info, keys, off)


def _frozen_cost(factors, lin, values) -> float:
    """Cost with each noise covariance held at its value from the last linearization.

    Factors whose noise depends on the state (full-noise interpolation wrappers)
    make the exact cost non-quadratic in the noise; freezing it per iteration
    keeps the Gauss-Newton step a descent direction (iteratively reweighted).
    """
    total = 0.0
    for f, lf in zip(factors, lin):
        e = f.error(values)
        total += 0.5 * float(e @ np.linalg.solve(lf.noise, e))
    return total


def gauss_newton(
    graph: NonlinearGraph,
    values: Optional[Mapping] = None,
    config: SolverConfig = SolverConfig(),
    compute_covariance: bool = True,
) -> NonlinearSolution:
    values = dict(graph.values if values is None else values)
    graph.validate(values)
    keys = list(values)
    pos, off = _layout(values, keys)
    cost = graph.cost(values)
    trace = [cost]
    lam = 0.0 if config.damping == "gn" else config.lambda_init
    converged = False
    message = "max iterations reached"
    timing = {"linearize": [], "solve": []}
    it = 0
    while it < config.max_iterations:
        if cost <= config.abs_tol:
            converged, message = True, "zero cost"
            break
        t0 = _time.perf_counter()
        lin = linearize_graph(graph.factors, values)
        info, vec = assemble_linear(lin, keys, off, pos)
        t1 = _time.perf_counter()
        timing["linearize"].append(t1 - t0)
        rejections = 0
        solve_time = 0.0
        while True:
            A = info if lam == 0.0 else info + lam * sp.diags(info.diagonal())
            ts = _time.perf_counter()
            lu = _factorize(A, keys, off)
            step = lu.solve(vec)
            solve_time += _time.perf_counter() - ts
            deltas = {k: step[off[i] : off[i + 1]] for i, k in enumerate(keys)}
            trial = retract_all(values, deltas)
            try:
                new_cost = _frozen_cost(graph.factors, lin, trial)
            except (InjectivityError, DegenerateGeometryError):
                new_cost = np.inf
            if new_cost <= cost:
                break
            rejections += 1
            if rejections > config.max_rejections:
                break
            lam = config.lambda_init if lam == 0.0 else lam * config.lambda_factor
        timing["solve"].append(solve_time)
        it += 1
        if new_cost > cost:
            message = "damping exhausted without a cost decrease"
            break
        decrease = cost - new_cost
        values = trial
        cost = graph.cost(values)
        trace.append(cost)
        if lam > 0.0:
            lam = lam / config.lambda_factor
            if config.damping == "gn" and lam < config.lambda_init:
                lam = 0.0
        if decrease <= config.rel_tol * max(cost + decrease, config.abs_tol) or float(np.max(np.abs(step), initial=0.0)) == 0.0:
            converged, message = True, "relative decrease below tolerance"
            break
    cov = laplace(graph.factors, values, keys) if compute_covariance else None
    return NonlinearSolution(values, trace, converged, it, cov, timing, message)


# ---------------------------------------------------------------- interpolation


@lru_cache(maxsize=4096)
def _coeffs_cached(qc_key: tuple, m: int, t_prev: float, tau: float, t_next: float):
    Qc = np.array(qc_key).reshape(m, m)
    c = interp_coeffs(wnoa_model(Qc), t_prev, tau, t_next)
    return c.Lambda, c.Psi, c.Sigma


def _local_coeffs(Qc: np.ndarray, t_prev, tau, t_next):
    return _coeffs_cached(tuple(np.asarray(Qc, dtype=float).ravel()), Qc.shape[0], float(t_prev), float(tau), float(t_next))


@dataclass(frozen=True)
class LieInterpolation:
    pose: LieElement
    vel: np.ndarray
    jacobian: Optional[np.ndarray]  # d(eps_tau, dw_tau) / d(eps_1, dw_1, eps_2, dw_2)
    cov: np.ndarray  # conditional covariance given the bracket, on (eps_tau, dw_tau)
    xi: np.ndarray
    xi_dot: np.ndarray


def interpolate_lie(T1: LieElement, w1, t1: float, T2: LieElement, w2, t2: float, tau: float, Qc, jacobian: bool = True):
    """Posterior-mean interpolation between two knots through the local GP variable."""
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    m = w1.shape[0]
    lam, psi, sigma = _local_coeffs(Qc, t1, tau, t2)
    xi21 = T1.between(T2)
    jinv21 = right_jacobian_inv(xi21)
    g1 = np.concatenate([np.zeros(m), w1])
    g2 = np.concatenate([xi21, jinv21 @ w2])
    g = lam @ g1 + psi @ g2
    xi, xi_dot = g[:m], g[m:]
    Jr = right_jacobian(xi)
    pose = perturb(T1, xi)
    vel = Jr @ xi_dot
    DJ = d_right_jacobian(xi, xi_dot)
    # map local-variable increments (dxi, dxi') to (eps_tau, dw_tau)
    M = np.block([[Jr, np.zeros((m, m))], [DJ, Jr]])
    cov = M @ sigma @ M.T
    jac = None
    if jacobian:
        z = np.zeros((m, m))
        eye = np.eye(m)
        dxi21_1 = -right_jacobian_inv(-xi21)
        dxi21_2 = jinv21
        Dinv = d_right_jacobian_inv(xi21, w2)
        # d g2 / d(eps1, dw1, eps2, dw2)
        dg2 = np.block([[dxi21_1, z, dxi21_2, z], [Dinv @ dxi21_1, z, Dinv @ dxi21_2, jinv21]])
        dg1 = np.block([[z, z, z, z], [z, eye, z, z]])
        dg = lam @ dg1 + psi @ dg2
        ad_back = LieElement.exp(-xi).adjoint()
        jac = M @ dg
        jac[:m, :m] += ad_back
    return LieInterpolation(pose, vel, jac, 0.5 * (cov + cov.T), xi, xi_dot)


def find_bracket(times: np.ndarray, tau: float):
    """(index, snapped) with index of the knot when snapped, else of the right bracket end."""
    k = int(np.argmin(np.abs(times - tau)))
    if abs(times[k] - tau) <= SNAP_TOL:
        return k, True
    if tau < times[0] or tau > times[-1]:
        raise ValueError(f"query time {tau} is outside the trajectory span [{times[0]}, {times[-1]}]")
    return int(np.searchsorted(times, tau, side="right")), False


@dataclass(frozen=True)
class LieQuery:
    time: float
    pose: LieElement
    vel: np.ndarray
    cov: np.ndarray
    snapped: bool = False


def query_lie(solution: NonlinearSolution, knots: Sequence[LieKnot], Qc, tau: float) -> LieQuery:
    """Posterior mean and covariance of (pose, velocity) at ``tau`` after the main solve."""
    knots = sorted(knots, key=lambda k: k.time)
    times = np.array([k.time for k in knots])
    k, snapped = find_bracket(times, tau)
    v = solution.values
    if snapped:
        kn = knots[k]
        cov = solution.joint([kn.pose_key, kn.vel_key]) if solution.covariance is not None else None
        return LieQuery(float(tau), v[kn.pose_key], np.asarray(v[kn.vel_key]), cov, True)
    a, b = knots[k - 1], knots[k]
    pair = None
    if solution.covariance is not None:
        pair = solution.joint([a.pose_key, a.vel_key, b.pose_key, b.vel_key])
    return query_lie_pair(v, a, b, Qc, tau, pair)


def query_lie_pair(values: Mapping, a: LieKnot, b: LieKnot, Qc, tau: float, pair_cov: Optional[np.ndarray]) -> LieQuery:
    """Query inside one bracket given the joint covariance of (pose_a, vel_a, pose_b, vel_b)."""
    if not a.time < tau < b.time:
        raise ValueError(f"query time {tau} is not inside ({a.time}, {b.time})")
    interp = interpolate_lie(
        values[a.pose_key], values[a.vel_key], a.time, values[b.pose_key], values[b.vel_key], b.time, tau, Qc, False
    )
    cov = None
    if pair_cov is not None:
        G, S = local_conditional(values, a, b, tau, interp, Qc)
        P = S + G @ pair_cov @ G.T
        cov = 0.5 * (P + P.T)
    return LieQuery(float(tau), interp.pose, interp.vel, cov, False)


def local_conditional(values: Mapping, a: LieKnot, b: LieKnot, tau: float, interp: LieInterpolation, Qc):
    """Gain and covariance of p(eps_tau, dw_tau | bracket perturbations).

    The two motion factors a->tau and tau->b are linearized at the interpolated
    mean and the query state is eliminated.
    """
    q = LieKnot(("__query_pose__",), ("__query_vel__",), float(tau))
    vals = {
        a.pose_key: values[a.pose_key],
        a.vel_key: values[a.vel_key],
        b.pose_key: values[b.pose_key],
        b.vel_key: values[b.vel_key],
        q.pose_key: interp.pose,
        q.vel_key: interp.vel,
    }
    f1 = LieWnoaFactor(a, q, Qc).linearize(vals)
    f2 = LieWnoaFactor(q, b, Qc).linearize(vals)
    product = fuse([f1.to_quadratic(), f2.to_quadratic()])
    cond, _ = eliminate(product, [q.pose_key, q.vel_key])
    # eliminate() keeps first-seen key order, so the frontal block is (pose, vel)
    order = [a.pose_key, a.vel_key, b.pose_key, b.vel_key]
    sep = {}
    off = 0
    for k, d in zip(cond.separator_keys, cond.separator_dims):
        sep[k] = slice(off, off + d)
        off += d
    gain = np.hstack([cond.gain[:, sep[k]] for k in order])
    return gain, np.array(cond.cov)


def constant_velocity_init(
    knots: Sequence[LieKnot], group: Group, first_pose: Optional[LieElement] = None, velocity=None
) -> Values:
    """Initial values by propagating a constant body velocity from the first pose."""
    knots = sorted(knots, key=lambda k: k.time)
    T = first_pose if first_pose is not None else LieElement.identity(group)
    w = np.zeros(group.dof) if velocity is None else np.asarray(velocity, dtype=float)
    out = {knots[0].pose_key: T, knots[0].vel_key: w.copy()}
    for prev, nxt in zip(knots, knots[1:]):
        T = perturb(T, (nxt.time - prev.time) * w)
        out[nxt.pose_key] = T
        out[nxt.vel_key] = w.copy()
    return out


def add_motion_prior(graph: NonlinearGraph, knots: Sequence[LieKnot], Qc) -> None:
    knots = sorted(knots, key=lambda k: k.time)
    for prev, nxt in zip(knots, knots[1:]):
        graph.add(LieWnoaFactor(prev, nxt, Qc))
