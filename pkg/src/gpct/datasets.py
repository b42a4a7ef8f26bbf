"""Synthetic trajectories, measurement logs and accuracy/consistency metrics.

All generators draw from ``numpy.random.Generator(PCG64(seed))`` with a 64-bit
seed, so runs are bit-reproducible within this implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gaussian import GaussianDensity, is_spd
from .lie import Group, LieElement, perturb, pose_to_vector, right_jacobian
from .lti import wnoa_phi, wnoa_q

SEED_MAX = 2**64


def make_rng(seed: int) -> np.random.Generator:
    if not isinstance(seed, (int, np.integer)) or not 0 <= int(seed) < SEED_MAX:
        raise ValueError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class Trajectory:
    """Ground truth. ``states`` is an (N, n) array for vector states, or a list of (pose, velocity)."""

    times: np.ndarray
    states: object
    landmarks: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if len(self.states) != len(self.times):
            raise ValueError("one state per timestamp is required")

    @property
    def is_lie(self) -> bool:
        return not isinstance(self.states, np.ndarray)


@dataclass(frozen=True)
class MeasurementRecord:
    time: float
    sensor: str
    value: np.ndarray
    cov: np.ndarray
    target: Optional[int] = None  # landmark index for landmark sensors

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.shape != (v.shape[0], v.shape[0]) or not np.allclose(c, c.T) or not is_spd(c):
            raise ValueError(f"record at t={self.time}: covariance must be SPD and match the value")
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "cov", c)


@dataclass
class MeasurementLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    def by_sensor(self, sensor: str) -> list:
        return [r for r in self.records if r.sensor == sensor]


def _grid(rate: float, duration: float) -> np.ndarray:
    if not rate > 0:
        raise ValueError("rate must be positive")
    if not duration > 0:
        raise ValueError("duration must be positive")
    n = int(round(rate * duration))
    return np.arange(n + 1) / rate


def gen_sinusoid_1d(rate: float, duration: float, meas_noise_sd: float, seed: int):
    """p(t) = sin t with noisy position measurements at ``rate`` Hz."""
    rng = make_rng(seed)
    t = _grid(rate, duration)
    states = np.column_stack([np.sin(t), np.cos(t)])
    noise = rng.normal(0.0, 1.0, size=t.shape) * meas_noise_sd
    var = max(meas_noise_sd, 1e-3) ** 2
    records = [MeasurementRecord(float(ti), "position", [states[i, 0] + noise[i]], [[var]]) for i, ti in enumerate(t)]
    return Trajectory(t, states), MeasurementLog(records)


def _pose_records(times, poses, sd_trans, sd_rot, rng, noisy: bool):
    out = []
    for ti, T in zip(times, poses):
        dof = T.dof
        nt = dof // 2 if dof == 6 else 2
        sd = np.r_[np.full(nt, sd_trans), np.full(dof - nt, sd_rot)]
        eps = rng.normal(size=dof) * sd if noisy else np.zeros(dof)
        meas = perturb(T, eps)
        out.append(MeasurementRecord(float(ti), "pose", pose_to_vector(meas), np.diag(sd**2)))
    return out


def gen_se2_arc(
    n_knots: int = 60,
    noise_mode: str = "none",
    seed: int = 0,
    dt: float = 0.1,
    twist=(1.0, 0.0, 0.5),
    sd_trans: float = 0.05,
    sd_rot: float = 0.02,
):
    """Constant-twist SE(2) arc sampled at ``n_knots`` equidistant poses with unary pose measurements."""
    if n_knots < 2:
        raise ValueError("n_knots must be at least 2")
    if noise_mode not in ("none", "noisy"):
        raise ValueError("noise_mode must be 'none' or 'noisy'")
    rng = make_rng(seed)
    w = np.asarray(twist, dtype=float)
    t = np.arange(n_knots) * dt
    step = LieElement.exp(dt * w)
    poses = [LieElement.identity(Group.SE2)]
    for _ in range(n_knots - 1):
        poses.append(poses[-1] @ step)
    states = [(T, w.copy()) for T in poses]
    records = _pose_records(t, poses, sd_trans, sd_rot, rng, noise_mode == "noisy")
    return Trajectory(t, states), MeasurementLog(records)


def gen_se3_traj(
    n_knots: int = 50,
    noise_mode: str = "noisy",
    seed: int = 0,
    dt: float = 0.1,
    coeffs=None,
    sd_trans: float = 0.05,
    sd_rot: float = 0.02,
):
    """T(t) = Exp(c1 t + c2 t^2 + c3 t^3), velocity w(t) = J_r(xi(t)) xi'(t).

    With ``c2 = c3 = 0`` the trajectory is a constant-twist geodesic.
    """
    if n_knots < 2:
        raise ValueError("n_knots must be at least 2")
    if noise_mode not in ("none", "noisy"):
        raise ValueError("noise_mode must be 'none' or 'noisy'")
    rng = make_rng(seed)
    if coeffs is None:
        coeffs = (
            np.array([1.0, 0.2, 0.1, 0.05, 0.1, 0.3]),
            np.array([0.1, -0.05, 0.02, 0.02, -0.01, 0.0]),
            np.array([0.0, 0.01, 0.0, 0.0, 0.0, -0.005]),
        )
    c1, c2, c3 = (np.asarray(c, dtype=float) for c in coeffs)
    t = np.arange(n_knots) * dt
    states = []
    for ti in t:
        xi = c1 * ti + c2 * ti**2 + c3 * ti**3
        xi_dot = c1 + 2.0 * c2 * ti + 3.0 * c3 * ti**2
        if np.linalg.norm(xi[3:]) >= np.pi:
            raise ValueError("trajectory rotates past pi; shorten it or reduce the rotation rates")
        states.append((LieElement.exp(xi), right_jacobian(xi) @ xi_dot))
    records = _pose_records(t, [s[0] for s in states], sd_trans, sd_rot, rng, noise_mode == "noisy")
    return Trajectory(t, states), MeasurementLog(records)


def sample_lie_wnoa(times: Sequence[float], Qc, T0: LieElement, w0, rng: np.random.Generator) -> list:
    """Draw a trajectory from the Lie-group WNOA prior, knot by knot through the local variable."""
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    m = Qc.shape[0]
    T, w = T0, np.asarray(w0, dtype=float)
    out = [(T, w.copy())]
    for a, b in zip(times, times[1:]):
        dt = b - a
        mean = wnoa_phi(m, dt) @ np.concatenate([np.zeros(m), w])
        g = rng.multivariate_normal(mean, wnoa_q(Qc, dt))
        xi, xi_dot = g[:m], g[m:]
        T = perturb(T, xi)
        w = right_jacobian(xi) @ xi_dot
        out.append((T, w))
    return out


def gen_se2_landmarks(
    n_knots: int = 100,
    dt: float = 0.1,
    n_landmarks: int = 8,
    Qc=(0.2, 0.05, 0.2),
    w0=(1.0, 0.0, 0.2),
    sd_bearing: float = 0.02,
    sd_range: float = 0.05,
    max_obs: int = 3,
    seed: int = 0,
):
    """SE(2) trajectory sampled from the WNOA prior, observing point landmarks by bearing/range.

    Each knot observes its ``max_obs`` nearest landmarks.
    """
    rng = make_rng(seed)
    Qc = np.diag(np.asarray(Qc, dtype=float)) if np.ndim(Qc) == 1 else np.asarray(Qc, dtype=float)
    t = np.arange(n_knots) * dt
    states = sample_lie_wnoa(t, Qc, LieElement.identity(Group.SE2), w0, rng)
    pos = np.array([s[0].translation for s in states])
    lo, hi = pos.min(axis=0) - 2.0, pos.max(axis=0) + 2.0
    landmarks = rng.uniform(lo, hi, size=(n_landmarks, 2))
    cov = np.diag([sd_bearing**2, sd_range**2])
    records = []
    for ti, (T, _) in zip(t, states):
        d = np.linalg.norm(landmarks - T.translation, axis=1)
        for j in np.argsort(d)[:max_obs]:
            p = T.rotation.T @ (landmarks[j] - T.translation)
            b = np.arctan2(p[1], p[0]) + rng.normal() * sd_bearing
            r = np.hypot(p[0], p[1]) + rng.normal() * sd_range
            records.append(MeasurementRecord(float(ti), "bearing_range", [b, r], cov, int(j)))
    return Trajectory(t, states, landmarks), MeasurementLog(records)


def gen_linear_wnoa(
    n_knots: int, dt: float, Qc, meas_sd: float, prior: GaussianDensity, seed: int, meas_every: int = 1
):
    """Vector WNOA trajectory sampled from its own prior, with position measurements."""
    rng = make_rng(seed)
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    m = Qc.shape[0]
    t = np.arange(n_knots) * dt
    x = rng.multivariate_normal(prior.mean, prior.cov)
    states = [x]
    phi, q = wnoa_phi(m, dt), wnoa_q(Qc, dt)
    for _ in range(n_knots - 1):
        x = phi @ x + rng.multivariate_normal(np.zeros(2 * m), q)
        states.append(x)
    states = np.array(states)
    records = []
    for i in range(0, n_knots, meas_every):
        y = states[i, :m] + rng.normal(size=m) * meas_sd
        records.append(MeasurementRecord(float(t[i]), "position", y, meas_sd**2 * np.eye(m)))
    return Trajectory(t, states), MeasurementLog(records)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metrics:
    rmse_translation: float
    rmse_rotation: Optional[float]
    nees: np.ndarray
    mean_nees: float


def state_error(estimate, truth) -> np.ndarray:
    """Tangent-space error with truth = estimate (+) e."""
    if isinstance(estimate, tuple):
        T_hat, w_hat = estimate
        T, w = truth
        return np.concatenate([(T_hat.inverse() @ T).log(), np.asarray(w) - np.asarray(w_hat)])
    if isinstance(estimate, LieElement):
        return (estimate.inverse() @ truth).log()
    return np.asarray(truth, dtype=float) - np.asarray(estimate, dtype=float)


def metrics(
    estimates: Sequence,
    covariances: Sequence[np.ndarray],
    truth: Sequence,
    est_times: Optional[Sequence[float]] = None,
    truth_times: Optional[Sequence[float]] = None,
    position_dims: Optional[int] = None,
    time_tol: float = 1e-9,
) -> Metrics:
    """RMSE (translation / rotation) and NEES of estimates against aligned ground truth.

    Lie estimates are poses or (pose, velocity) tuples; RMSE uses position
    differences and rotation angles. Vector estimates use the first
    ``position_dims`` components for RMSE (all if omitted).
    """
    if len(estimates) != len(truth) or len(estimates) != len(covariances):
        raise ValueError("estimates, covariances and truth must have the same length")
    if est_times is not None and truth_times is not None:
        a, b = np.asarray(est_times, dtype=float), np.asarray(truth_times, dtype=float)
        if a.shape != b.shape or np.any(np.abs(a - b) > time_tol):
            raise ValueError("estimate and truth timestamps are not aligned")
    nees = np.empty(len(estimates))
    trans_sq, rot_sq = [], []
    lie = False
    for i, (x, P, xt) in enumerate(zip(estimates, covariances, truth)):
        e = state_error(x, xt)
        P = np.atleast_2d(P)
        if P.shape != (e.shape[0], e.shape[0]):
            raise ValueError(f"covariance {i} has shape {P.shape}, error has {e.shape[0]} entries")
        nees[i] = float(e @ np.linalg.solve(P, e))
        pose_hat = x[0] if isinstance(x, tuple) else x
        if isinstance(pose_hat, LieElement):
            lie = True
            pose_true = xt[0] if isinstance(xt, tuple) else xt
            trans_sq.append(float(np.sum((pose_hat.translation - pose_true.translation) ** 2)))
            rel = pose_hat.inverse() @ pose_true
            rot = rel.log()[2:3] if pose_hat.group is Group.SE2 else rel.log()[3:]
            rot_sq.append(float(np.sum(rot**2)))
        else:
            k = e.shape[0] if position_dims is None else position_dims
            trans_sq.append(float(np.sum(e[:k] ** 2)))
    rmse_t = float(np.sqrt(np.mean(trans_sq))) if trans_sq else 0.0
    rmse_r = float(np.sqrt(np.mean(rot_sq))) if lie else None
    return Metrics(rmse_t, rmse_r, nees, float(np.mean(nees)) if len(nees) else 0.0)
