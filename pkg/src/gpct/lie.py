"""SE(2) and SE(3) primitives with right perturbations T = T_op Exp(eps).

Tangent coordinates put translation first: SE(2) xi = (rho_x, rho_y, theta),
SE(3) xi = (rho, phi). Jacobians are closed-form away from the identity and
fall back to the power series in ad(xi) near it. The derivatives of
J(xi) u and J(xi)^-1 u with respect to xi are evaluated from the same series
(Horner form), which converges for every rotation angle below 2 pi.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import bernoulli, factorial

LOG_GUARD = 1e-9
ORTHO_TOL = 1e-9
REORTHO_TOL = 1e-12
SERIES_ANGLE = 0.1
POLE_TOL = 1e-6


class InjectivityError(ValueError):
    """Rotation angle at or beyond pi where Log stops being single-valued."""


class Group(enum.Enum):
    SE2 = "SE2"
    SE3 = "SE3"

    @property
    def dof(self) -> int:
        return 3 if self is Group.SE2 else 6

    @property
    def mat_dim(self) -> int:
        return 3 if self is Group.SE2 else 4

    @classmethod
    def from_dof(cls, dof: int) -> "Group":
        if dof == 3:
            return cls.SE2
        if dof == 6:
            return cls.SE3
        raise ValueError(f"no supported group has {dof} degrees of freedom")


def group_of(xi) -> Group:
    return Group.from_dof(np.asarray(xi).shape[0])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _angle(xi: np.ndarray) -> float:
    return abs(float(xi[2])) if xi.shape[0] == 3 else float(np.linalg.norm(xi[3:]))


# ---------------------------------------------------------------- algebra


def hat(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if group_of(xi) is Group.SE2:
        return np.array([[0.0, -xi[2], xi[0]], [xi[2], 0.0, xi[1]], [0.0, 0.0, 0.0]])
    out = np.zeros((4, 4))
    out[:3, :3] = skew(xi[3:])
    out[:3, 3] = xi[:3]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    if m.shape == (3, 3):
        return np.array([m[0, 2], m[1, 2], m[1, 0]])
    return np.array([m[0, 3], m[1, 3], m[2, 3], m[2, 1], m[0, 2], m[1, 0]])


def ad(xi) -> np.ndarray:
    """Matrix of the Lie bracket: ad(a) b = vee(hat(a) hat(b) - hat(b) hat(a))."""
    xi = np.asarray(xi, dtype=float)
    if group_of(xi) is Group.SE2:
        return np.array([[0.0, -xi[2], xi[1]], [xi[2], 0.0, -xi[0]], [0.0, 0.0, 0.0]])
    out = np.zeros((6, 6))
    p = skew(xi[3:])
    out[:3, :3] = p
    out[3:, 3:] = p
    out[:3, 3:] = skew(xi[:3])
    return out


# ---------------------------------------------------------------- scalar coefficients


def _sinc(t):
    return 1.0 - t * t / 6.0 + t**4 / 120.0 if abs(t) < 1e-2 else np.sin(t) / t


def _cosc(t):
    """(1 - cos t) / t^2"""
    return 0.5 - t * t / 24.0 + t**4 / 720.0 if abs(t) < 1e-2 else 2.0 * np.sin(0.5 * t) ** 2 / (t * t)


def _sinc3(t):
    """(t - sin t) / t^3"""
    return 1.0 / 6.0 - t * t / 120.0 + t**4 / 5040.0 if abs(t) < 1e-2 else (t - np.sin(t)) / t**3


# ---------------------------------------------------------------- SO(3) helpers


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    t = float(np.linalg.norm(phi))
    p = skew(phi)
    return np.eye(3) + _sinc(t) * p + _cosc(t) * p @ p


def so3_log(R: np.ndarray) -> np.ndarray:
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    t = float(np.arctan2(s, c))
    if t >= np.pi - LOG_GUARD:
        raise InjectivityError(f"rotation angle {t:.12f} rad is within {LOG_GUARD} of pi; Log is ambiguous")
    return w / _sinc(t)


def so3_left_jacobian(phi) -> np.ndarray:
    t = float(np.linalg.norm(phi))
    p = skew(phi)
    return np.eye(3) + _cosc(t) * p + _sinc3(t) * p @ p


def so3_left_jacobian_inv(phi) -> np.ndarray:
    t = float(np.linalg.norm(phi))
    p = skew(phi)
    if t < 1e-2:
        k = 1.0 / 12.0 + t * t / 720.0 + t**4 / 30240.0
    else:
        k = (1.0 - t * np.sin(t) / (2.0 * (1.0 - np.cos(t)))) / (t * t)
    return np.eye(3) - 0.5 * p + k * p @ p


def _se3_q(rho, phi) -> np.ndarray:
    t = float(np.linalg.norm(phi))
    r = skew(rho)
    p = skew(phi)
    pr = p @ r
    rp = r @ p
    prp = pr @ p
    if t < 1e-2:
        t2 = t * t
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, c = np.sin(t), np.cos(t)
        c1 = (t - s) / t**3
        c2 = (t * t + 2.0 * c - 2.0) / (2.0 * t**4)
        c3 = (2.0 * t - 3.0 * s + t * c) / (2.0 * t**5)
    return 0.5 * r + c1 * (pr + rp + prp) + c2 * (p @ pr + rp @ p - 3.0 * prp) + c3 * (prp @ p + p @ prp)


# ---------------------------------------------------------------- series in ad(xi)


@lru_cache(maxsize=None)
def _coeffs(kind: str, n: int) -> np.ndarray:
    k = np.arange(n + 1)
    if kind == "J":
        return (-1.0) ** k / factorial(k + 1)
    b = bernoulli(n)
    return b * (-1.0) ** k / factorial(k)


def _terms(xi: np.ndarray, kind: str) -> int:
    t = _angle(xi)
    if kind == "J":
        n = 8
        while t**n / factorial(n + 1) * (n + 1) * max(1.0, float(np.linalg.norm(xi))) > 1e-18 and n < 80:
            n += 4
        return n
    ratio = t / (2.0 * np.pi)
    if ratio <= 1e-3:
        return 8
    n = int(np.ceil(np.log(1e-18) / np.log(ratio))) + 8
    return min(n, 160)


def _series(xi: np.ndarray, kind: str) -> np.ndarray:
    X = ad(xi)
    c = _coeffs(kind, _terms(xi, kind))
    diag = np.diag_indices(xi.shape[0])
    out = np.zeros((xi.shape[0], xi.shape[0]))
    out[diag] = c[-1]
    for ck in c[-2::-1]:
        out = X @ out
        out[diag] += ck
    return out


def _series_derivative(xi: np.ndarray, u: np.ndarray, kind: str) -> np.ndarray:
    """d/dxi [ f(ad xi) u ] for f given by the series coefficients of ``kind``."""
    X = ad(xi)
    c = _coeffs(kind, _terms(xi, kind))
    d = xi.shape[0]
    s = c[-1] * u
    D = np.zeros((d, d))
    for ck in c[-2::-1]:
        # d(X s) = X ds + ad(dxi) s = X ds - ad(s) dxi
        D = X @ D - ad(s)
        s = ck * u + X @ s
    return D


def _check_pole(xi: np.ndarray) -> None:
    t = _angle(xi)
    if t > np.pi and abs(t / (2.0 * np.pi) - round(t / (2.0 * np.pi))) * 2.0 * np.pi < POLE_TOL:
        raise ValueError(f"right Jacobian is singular at rotation angle {t:.6f} (multiple of 2 pi)")


# ---------------------------------------------------------------- Jacobians


def right_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    _check_pole(xi)
    if _angle(xi) < SERIES_ANGLE:
        return _series(xi, "J")
    if group_of(xi) is Group.SE2:
        r1, r2, t = xi
        s, c = np.sin(t), np.cos(t)
        return np.array(
            [
                [s / t, (1.0 - c) / t, (t * r1 - r2 + r2 * c - r1 * s) / (t * t)],
                [(c - 1.0) / t, s / t, (r1 + t * r2 - r1 * c - r2 * s) / (t * t)],
                [0.0, 0.0, 1.0],
            ]
        )
    # J_r(xi) = J_l(-xi)
    rho, phi = -xi[:3], -xi[3:]
    jl = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = jl
    out[3:, 3:] = jl
    out[:3, 3:] = _se3_q(rho, phi)
    return out


def right_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    _check_pole(xi)
    if _angle(xi) < SERIES_ANGLE:
        return _series(xi, "Jinv")
    if group_of(xi) is Group.SE2:
        J = right_jacobian(xi)
        a, b = J[0, 0], J[0, 1]
        vinv = np.array([[a, -b], [b, a]]) / (a * a + b * b)
        out = np.eye(3)
        out[:2, :2] = vinv
        out[:2, 2] = -vinv @ J[:2, 2]
        return out
    rho, phi = -xi[:3], -xi[3:]
    jli = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = jli
    out[3:, 3:] = jli
    out[:3, 3:] = -jli @ _se3_q(rho, phi) @ jli
    return out


def d_right_jacobian(xi, u) -> np.ndarray:
    """Derivative of J_r(xi) u with respect to xi."""
    xi = np.asarray(xi, dtype=float)
    return _series_derivative(xi, np.asarray(u, dtype=float), "J")


def d_right_jacobian_inv(xi, u) -> np.ndarray:
    """Derivative of J_r(xi)^-1 u with respect to xi."""
    xi = np.asarray(xi, dtype=float)
    _check_pole(xi)
    if _angle(xi) >= 2.0 * np.pi:
        raise ValueError("series for the inverse Jacobian diverges beyond 2 pi")
    return _series_derivative(xi, np.asarray(u, dtype=float), "Jinv")


# ---------------------------------------------------------------- Exp / Log


def exp_matrix(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("tangent vector has non-finite entries")
    if group_of(xi) is Group.SE2:
        r1, r2, t = xi
        s, c = np.sin(t), np.cos(t)
        a, b = _sinc(t), t * _cosc(t)
        out = np.eye(3)
        out[:2, :2] = [[c, -s], [s, c]]
        out[:2, 2] = [a * r1 - b * r2, b * r1 + a * r2]
        return out
    out = np.eye(4)
    out[:3, :3] = so3_exp(xi[3:])
    out[:3, 3] = so3_left_jacobian(xi[3:]) @ xi[:3]
    return out


def log_matrix(T: np.ndarray) -> np.ndarray:
    if T.shape == (3, 3):
        t = float(np.arctan2(T[1, 0], T[0, 0]))
        if abs(t) >= np.pi - LOG_GUARD:
            raise InjectivityError(f"rotation angle {t:.12f} rad is within {LOG_GUARD} of pi; Log is ambiguous")
        a, b = _sinc(t), t * _cosc(t)
        x, y = T[0, 2], T[1, 2]
        den = a * a + b * b
        return np.array([(a * x + b * y) / den, (-b * x + a * y) / den, t])
    phi = so3_log(T[:3, :3])
    return np.concatenate([so3_left_jacobian_inv(phi) @ T[:3, 3], phi])


def adjoint_matrix(T: np.ndarray) -> np.ndarray:
    if T.shape == (3, 3):
        out = np.eye(3)
        out[:2, :2] = T[:2, :2]
        out[:2, 2] = [T[1, 2], -T[0, 2]]
        return out
    R, t = T[:3, :3], T[:3, 3]
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[:3, 3:] = skew(t) @ R
    return out


def _orthonormalize(T: np.ndarray) -> np.ndarray:
    out = np.array(T, dtype=float)
    if T.shape == (3, 3):
        t = np.arctan2(T[1, 0] - T[0, 1], T[0, 0] + T[1, 1])
        out[:2, :2] = [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]
    else:
        u, _, vt = np.linalg.svd(T[:3, :3])
        R = u @ vt
        if np.linalg.det(R) < 0:
            u[:, -1] *= -1
            R = u @ vt
        out[:3, :3] = R
    out[-1, :-1] = 0.0
    out[-1, -1] = 1.0
    return out


# ---------------------------------------------------------------- value types


@dataclass(frozen=True, eq=False)
class LieElement:
    group: Group
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        d = self.group.mat_dim
        if m.shape != (d, d):
            raise ValueError(f"{self.group.value} needs a {d}x{d} matrix, got {m.shape}")
        R = m[:-1, :-1]
        if np.max(np.abs(R.T @ R - np.eye(d - 1))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation block is not a proper rotation")
        bottom = np.zeros(d)
        bottom[-1] = 1.0
        if not np.array_equal(m[-1], bottom):
            raise ValueError("bottom row must be (0, ..., 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def _trusted(cls, group: Group, m: np.ndarray) -> "LieElement":
        # skips validation for products of already valid elements
        m.setflags(write=False)
        obj = object.__new__(cls)
        object.__setattr__(obj, "group", group)
        object.__setattr__(obj, "matrix", m)
        return obj

    @classmethod
    def identity(cls, group: Group) -> "LieElement":
        return cls(group, np.eye(group.mat_dim))

    @classmethod
    def exp(cls, xi) -> "LieElement":
        xi = np.asarray(xi, dtype=float)
        return cls(group_of(xi), exp_matrix(xi))

    @property
    def dof(self) -> int:
        return self.group.dof

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:-1, :-1]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:-1, -1]

    def log(self) -> np.ndarray:
        return log_matrix(self.matrix)

    def inverse(self) -> "LieElement":
        R, t = self.rotation, self.translation
        out = np.eye(self.group.mat_dim)
        out[:-1, :-1] = R.T
        out[:-1, -1] = -R.T @ t
        return LieElement._trusted(self.group, out)

    def compose(self, other: "LieElement") -> "LieElement":
        if other.group is not self.group:
            raise TypeError(f"cannot compose {self.group.value} with {other.group.value}")
        return LieElement._trusted(self.group, _orthonormalize_if_needed(self.matrix @ other.matrix))

    __matmul__ = compose

    def adjoint(self) -> np.ndarray:
        return adjoint_matrix(self.matrix)

    def act(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def between(self, other: "LieElement") -> np.ndarray:
        """Log(self^-1 other)."""
        return (self.inverse() @ other).log()

    def isclose(self, other: "LieElement", atol: float = 1e-9) -> bool:
        return other.group is self.group and bool(np.allclose(self.matrix, other.matrix, rtol=0, atol=atol))

    def __repr__(self) -> str:
        return f"LieElement({self.group.value}, xi={np.array2string(self.log(), precision=4)})"


def _orthonormalize_if_needed(m: np.ndarray) -> np.ndarray:
    R = m[:-1, :-1]
    if np.max(np.abs(R.T @ R - np.eye(R.shape[0]))) > REORTHO_TOL:
        return _orthonormalize(m)
    return m


def perturb(T: LieElement, eps) -> LieElement:
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (T.dof,):
        raise ValueError(f"perturbation must have {T.dof} entries")
    return LieElement(T.group, _orthonormalize_if_needed(T.matrix @ exp_matrix(eps)))


@dataclass(frozen=True, eq=False)
class LieGaussian:
    """T = mean Exp(eps), eps ~ N(0, cov)."""

    mean: LieElement
    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        d = self.mean.dof
        if cov.shape != (d, d) or not np.allclose(cov, cov.T, atol=1e-12) or np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError(f"covariance must be a {d}x{d} SPD matrix")
        object.__setattr__(self, "cov", cov)

    def sample(self, rng: np.random.Generator, size: int = 1) -> list:
        eps = rng.multivariate_normal(np.zeros(self.mean.dof), self.cov, size=size)
        return [perturb(self.mean, e) for e in eps]


def pose_to_vector(T: LieElement) -> np.ndarray:
    """Storage form: translation followed by the rotation angle (SE(2)) or rotation vector (SE(3))."""
    if T.group is Group.SE2:
        return np.array([T.matrix[0, 2], T.matrix[1, 2], np.arctan2(T.matrix[1, 0], T.matrix[0, 0])])
    R = T.rotation
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    t = float(np.arctan2(np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))
    if t > np.pi - 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = 0.5 * (R + np.eye(3))
        axis = B[:, int(np.argmax(np.diag(B)))]
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        phi = t * axis
    else:
        phi = w / _sinc(t)
    return np.concatenate([T.translation, phi])


def pose_from_vector(v, group: Group) -> LieElement:
    v = np.asarray(v, dtype=float)
    if v.shape != (group.dof,):
        raise ValueError(f"{group.value} pose vector needs {group.dof} entries")
    out = np.eye(group.mat_dim)
    if group is Group.SE2:
        c, s = np.cos(v[2]), np.sin(v[2])
        out[:2, :2] = [[c, -s], [s, c]]
        out[:2, 2] = v[:2]
    else:
        out[:3, :3] = so3_exp(v[3:])
        out[:3, 3] = v[:3]
    return LieElement(group, out)
