"""Discretization of the LTI SDE prior  dx/dt = A x + v(t) + L w(t),  w ~ GP(0, Qc delta).

Between two knots the prior reduces to x_k = Phi x_{k-1} + v_disc + w,
w ~ N(0, Q_disc). White-noise-on-acceleration (WNOA) models have closed forms;
anything else goes through fixed-order Gauss-Legendre quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import expm

from .gaussian import is_spd

QUADRATURE_ORDER = 32


@dataclass(frozen=True)
class LtiModel:
    A: np.ndarray
    L: np.ndarray
    Qc: np.ndarray
    v: Optional[Callable[[float], np.ndarray]] = None
    wnoa: bool = False

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        L = np.asarray(self.L, dtype=float)
        if L.ndim == 1:
            L = L.reshape(-1, 1)
        Qc = np.atleast_2d(np.asarray(self.Qc, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n) or L.shape[0] != n or Qc.shape != (L.shape[1], L.shape[1]):
            raise ValueError(f"non-conformable model: A {A.shape}, L {L.shape}, Qc {Qc.shape}")
        if not np.allclose(Qc, Qc.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Qc).max())) or not is_spd(Qc):
            raise ValueError("Qc must be symmetric positive definite")
        for name, val in (("A", A), ("L", L), ("Qc", Qc)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.L.shape[1]


@dataclass(frozen=True)
class TransitionBlocks:
    dt: float
    Phi: np.ndarray
    v_disc: np.ndarray
    Q_disc: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"interval duration must be positive, got {self.dt}")


def wnoa_model(Qc, m: int | None = None) -> LtiModel:
    """WNOA prior on an m-dimensional position: state [p; pdot], A = [0 I; 0 0], L = [0; I]."""
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    if Qc.shape[0] != Qc.shape[1]:
        raise ValueError("Qc must be square")
    m = Qc.shape[0] if m is None else m
    if Qc.shape != (m, m):
        raise ValueError(f"Qc must be {m}x{m}")
    if not is_spd(Qc) or not np.allclose(Qc, Qc.T):
        raise ValueError("Qc must be symmetric positive definite")
    A = np.zeros((2 * m, 2 * m))
    A[:m, m:] = np.eye(m)
    L = np.vstack([np.zeros((m, m)), np.eye(m)])
    return LtiModel(A, L, Qc, None, wnoa=True)


def wnoa_phi(m: int, dt: float) -> np.ndarray:
    phi = np.eye(2 * m)
    phi[:m, m:] = dt * np.eye(m)
    return phi


def wnoa_q(Qc: np.ndarray, dt: float) -> np.ndarray:
    Qc = np.atleast_2d(Qc)
    m = Qc.shape[0]
    q = np.empty((2 * m, 2 * m))
    q[:m, :m] = (dt**3 / 3.0) * Qc
    q[:m, m:] = q[m:, :m] = (dt**2 / 2.0) * Qc
    q[m:, m:] = dt * Qc
    return q


def transition(model: LtiModel, dt: float) -> np.ndarray:
    if dt < 0:
        raise ValueError(f"transition requires dt >= 0, got {dt}")
    if model.wnoa:
        # A is nilpotent (A^2 = 0), so the series stops after the linear term.
        return np.eye(model.n) + model.A * dt
    return expm(model.A * dt)


def _nodes(t_start: float, t_end: float, order: int):
    x, w = leggauss(order)
    half = 0.5 * (t_end - t_start)
    return half * x + 0.5 * (t_end + t_start), half * w


def quadrature_blocks(model: LtiModel, t_start: float, t_end: float, order: int = QUADRATURE_ORDER):
    """(v_disc, Q_disc) by Gauss-Legendre quadrature of the interval integrals."""
    s, w = _nodes(t_start, t_end, order)
    lql = model.L @ model.Qc @ model.L.T
    q = np.zeros((model.n, model.n))
    v = np.zeros(model.n)
    for si, wi in zip(s, w):
        phi = transition(model, t_end - si)
        q += wi * phi @ lql @ phi.T
        if model.v is not None:
            v += wi * phi @ np.asarray(model.v(si), dtype=float).reshape(model.n)
    return v, 0.5 * (q + q.T)


def discretize(model: LtiModel, t_start: float, t_end: float) -> TransitionBlocks:
    dt = float(t_end) - float(t_start)
    if not dt > 0:
        raise ValueError(f"t_end must exceed t_start (got {t_start} -> {t_end})")
    phi = transition(model, dt)
    if model.wnoa and model.v is None:
        return TransitionBlocks(dt, phi, np.zeros(model.n), wnoa_q(model.Qc, dt))
    v, q = quadrature_blocks(model, t_start, t_end)
    return TransitionBlocks(dt, phi, v, q)
