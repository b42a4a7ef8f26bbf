"""Gaussian densities and factors in information form.

A :class:`QuadraticFactor` stores the negative log of an (unnormalized)
Gaussian factor as

    phi(x) = 0.5 x^T Lambda x - eta^T x + c

over a stacked vector of variables identified by hashable keys. Fusion is
addition of natural parameters, elimination is a partitioned Cholesky
(Schur complement). Densities are kept in moment form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

Key = Hashable

SYMMETRY_RTOL = 1e-12


class SingularInformationError(np.linalg.LinAlgError):
    """Raised when a block that must be SPD is not.

    ``keys`` names the variables that are left unconstrained.
    """

    def __init__(self, keys: Sequence[Key], message: str = ""):
        self.keys = tuple(keys)
        text = message or "information matrix is singular"
        super().__init__(f"{text}; unconstrained key(s): {', '.join(map(str, self.keys))}")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=64)
def _lower_indices(n: int):
    return np.tril_indices(n, -1)


def _mirror_upper(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=float)
    il = _lower_indices(out.shape[0])
    out[il] = out.T[il]
    return out


def is_spd(m: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


def _offsets(dims: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(dims)]).astype(int)


@dataclass(frozen=True)
class GaussianDensity:
    """N(mean, cov), optionally laid out over named variable blocks."""

    mean: np.ndarray
    cov: np.ndarray
    keys: tuple = ()
    dims: tuple = ()

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise ValueError(f"mean of length {n} does not match covariance shape {cov.shape}")
        scale = max(1.0, float(np.max(np.abs(cov)))) if n else 1.0
        if n and np.max(np.abs(cov - cov.T)) > SYMMETRY_RTOL * scale:
            raise ValueError("covariance is not symmetric")
        if n and not is_spd(cov):
            raise ValueError("covariance is not positive definite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(_mirror_upper(cov)))
        keys = tuple(self.keys)
        dims = tuple(int(d) for d in self.dims)
        if keys:
            if not dims:
                if len(keys) != 1:
                    raise ValueError("dims are required for multi-key densities")
                dims = (n,)
            if len(dims) != len(keys) or sum(dims) != n:
                raise ValueError("keys/dims layout does not match the mean length")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "dims", dims)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def block_slice(self, key: Key) -> slice:
        try:
            i = self.keys.index(key)
        except ValueError:
            raise KeyError(f"unknown key {key!r}") from None
        off = _offsets(self.dims)
        return slice(off[i], off[i + 1])

    def to_factor(self, keys: Sequence[Key] | None = None, dims: Sequence[int] | None = None) -> "QuadraticFactor":
        keys = tuple(keys) if keys is not None else (self.keys or ("x",))
        dims = tuple(dims) if dims is not None else (self.dims or (self.dim,))
        c, low = cho_factor(self.cov)
        info = cho_solve((c, low), np.eye(self.dim))
        vec = info @ self.mean
        return QuadraticFactor(keys, dims, info, vec, 0.5 * float(self.mean @ vec))


@dataclass(frozen=True)
class QuadraticFactor:
    keys: tuple
    dims: tuple
    info: np.ndarray
    vec: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        keys = tuple(self.keys)
        dims = tuple(int(d) for d in self.dims)
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate keys in factor")
        if len(keys) != len(dims):
            raise ValueError("one dimension per key is required")
        n = sum(dims)
        info = np.asarray(self.info, dtype=float).reshape(n, n)
        vec = np.asarray(self.vec, dtype=float).reshape(n)
        scale = max(1.0, float(np.max(np.abs(info)))) if n else 1.0
        if n and np.max(np.abs(info - info.T)) > 1e-9 * scale:
            raise ValueError("information matrix is not symmetric")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "info", _frozen(_mirror_upper(info)))
        object.__setattr__(self, "vec", _frozen(vec))
        object.__setattr__(self, "constant", float(self.constant))

    @classmethod
    def empty(cls, constant: float = 0.0) -> "QuadraticFactor":
        return cls((), (), np.zeros((0, 0)), np.zeros(0), constant)

    @property
    def dim(self) -> int:
        return int(sum(self.dims))

    def index(self, keys: Iterable[Key]) -> np.ndarray:
        off = _offsets(self.dims)
        pos = {k: i for i, k in enumerate(self.keys)}
        idx = []
        for k in keys:
            if k not in pos:
                raise KeyError(f"unknown key {k!r}")
            i = pos[k]
            idx.extend(range(off[i], off[i + 1]))
        return np.asarray(idx, dtype=int)

    def block(self, row: Key, col: Key) -> np.ndarray:
        return self.info[np.ix_(self.index([row]), self.index([col]))]

    def cost(self, values: Mapping[Key, np.ndarray]) -> float:
        x = np.concatenate([np.atleast_1d(values[k]) for k in self.keys]) if self.keys else np.zeros(0)
        return float(0.5 * x @ self.info @ x - self.vec @ x + self.constant)

    def to_density(self) -> GaussianDensity:
        try:
            c = cho_factor(self.info)
        except np.linalg.LinAlgError:
            raise SingularInformationError(_unconstrained(self), "factor is not positive definite") from None
        cov = cho_solve(c, np.eye(self.dim))
        return GaussianDensity(cho_solve(c, self.vec), 0.5 * (cov + cov.T), self.keys, self.dims)


@dataclass(frozen=True)
class LinearFactor:
    """Gaussian factor in measurement form: e = sum_i H_i x_i - b, e ~ N(0, R)."""

    keys: tuple
    jacobians: tuple
    rhs: np.ndarray
    noise: np.ndarray
    label: str = field(default="", compare=False)

    def __post_init__(self):
        keys = tuple(self.keys)
        jac = tuple(np.atleast_2d(np.asarray(h, dtype=float)) for h in self.jacobians)
        rhs = np.atleast_1d(np.asarray(self.rhs, dtype=float))
        noise = np.atleast_2d(np.asarray(self.noise, dtype=float))
        p = rhs.shape[0]
        if len(jac) != len(keys):
            raise ValueError("one Jacobian block per key is required")
        for k, h in zip(keys, jac):
            if h.shape[0] != p:
                raise ValueError(f"Jacobian for key {k!r} has {h.shape[0]} rows, expected {p}")
        if noise.shape != (p, p) or not is_spd(noise):
            raise ValueError("noise covariance must be SPD and match the residual dimension")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "jacobians", tuple(_frozen(h) for h in jac))
        object.__setattr__(self, "rhs", _frozen(rhs))
        object.__setattr__(self, "noise", _frozen(_mirror_upper(noise)))

    @property
    def dims(self) -> tuple:
        return tuple(h.shape[1] for h in self.jacobians)

    def error(self, values: Mapping[Key, np.ndarray]) -> np.ndarray:
        e = -self.rhs.copy()
        for k, h in zip(self.keys, self.jacobians):
            e = e + h @ np.atleast_1d(values[k])
        return e

    def cost(self, values: Mapping[Key, np.ndarray]) -> float:
        e = self.error(values)
        return 0.5 * float(e @ np.linalg.solve(self.noise, e))

    def to_quadratic(self) -> QuadraticFactor:
        h = np.hstack(self.jacobians)
        c = cho_factor(self.noise)
        wh = cho_solve(c, h)
        wb = cho_solve(c, self.rhs)
        return QuadraticFactor(self.keys, self.dims, h.T @ wh, h.T @ wb, 0.5 * float(self.rhs @ wb))


@dataclass(frozen=True)
class ConditionalGaussian:
    """p(x | s) = N(gain @ s + offset, cov) for frontal x and separator s."""

    frontal_keys: tuple
    frontal_dims: tuple
    separator_keys: tuple
    separator_dims: tuple
    gain: np.ndarray
    offset: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        nx = sum(self.frontal_dims)
        ns = sum(self.separator_dims)
        gain = np.asarray(self.gain, dtype=float).reshape(nx, ns)
        object.__setattr__(self, "gain", _frozen(gain))
        object.__setattr__(self, "offset", _frozen(np.asarray(self.offset, dtype=float).reshape(nx)))
        object.__setattr__(self, "cov", _frozen(_mirror_upper(np.asarray(self.cov, dtype=float))))

    def mean(self, separator_values: Mapping[Key, np.ndarray] | None = None) -> np.ndarray:
        if not self.separator_keys:
            return np.array(self.offset)
        s = np.concatenate([np.atleast_1d(separator_values[k]) for k in self.separator_keys])
        return self.gain @ s + self.offset

    def to_factor(self) -> QuadraticFactor:
        """Negative log of the conditional as a factor on frontal + separator."""
        prec = cho_solve(cho_factor(self.cov), np.eye(self.cov.shape[0]))
        g = self.gain
        info = np.block([[prec, -prec @ g], [-g.T @ prec, g.T @ prec @ g]])
        po = prec @ self.offset
        vec = np.concatenate([po, -g.T @ po])
        return QuadraticFactor(
            self.frontal_keys + self.separator_keys,
            self.frontal_dims + self.separator_dims,
            info,
            vec,
            0.5 * float(self.offset @ po),
        )


def _unconstrained(factor: QuadraticFactor, keys: Iterable[Key] | None = None) -> list:
    keys = list(factor.keys if keys is None else keys)
    bad = []
    for k in keys:
        idx = factor.index([k])
        if not is_spd(factor.info[np.ix_(idx, idx)]):
            bad.append(k)
    return bad or keys


def fuse(factors: Sequence[QuadraticFactor]) -> QuadraticFactor:
    """Sum factors blockwise over the union of their keys (first-seen order)."""
    factors = list(factors)
    if not factors:
        return QuadraticFactor.empty()
    if len(factors) == 1:
        return factors[0]
    dims: dict = {}
    for f in factors:
        for k, d in zip(f.keys, f.dims):
            if dims.setdefault(k, d) != d:
                raise ValueError(f"dimension mismatch for key {k!r}: {dims[k]} vs {d}")
    keys = tuple(dims)
    off = _offsets([dims[k] for k in keys])
    pos = {k: i for i, k in enumerate(keys)}
    n = off[-1]
    info = np.zeros((n, n))
    vec = np.zeros(n)
    const = 0.0
    for f in factors:
        idx = np.concatenate([np.arange(off[pos[k]], off[pos[k] + 1]) for k in f.keys]) if f.keys else []
        idx = np.asarray(idx, dtype=int)
        info[np.ix_(idx, idx)] += f.info
        vec[idx] += f.vec
        const += f.constant
    return QuadraticFactor(keys, tuple(dims[k] for k in keys), info, vec, const)


def eliminate(product: QuadraticFactor, frontal: Iterable[Key]) -> tuple[ConditionalGaussian, QuadraticFactor]:
    """Split ``product`` into p(frontal | separator) and a residual factor on the separator."""
    frontal = set(frontal)
    unknown = frontal - set(product.keys)
    if unknown:
        raise KeyError(f"unknown frontal key(s): {sorted(map(str, unknown))}")
    fk = tuple(k for k in product.keys if k in frontal)
    sk = tuple(k for k in product.keys if k not in frontal)
    fdims = tuple(d for k, d in zip(product.keys, product.dims) if k in frontal)
    sdims = tuple(d for k, d in zip(product.keys, product.dims) if k not in frontal)
    ix = product.index(fk)
    is_ = product.index(sk)
    lxx = product.info[np.ix_(ix, ix)]
    lxs = product.info[np.ix_(ix, is_)]
    lss = product.info[np.ix_(is_, is_)]
    try:
        c = cho_factor(lxx)
    except np.linalg.LinAlgError:
        raise SingularInformationError(_unconstrained(product, fk), "frontal block is singular") from None
    cov = cho_solve(c, np.eye(len(ix)))
    gain = -cho_solve(c, lxs)
    offset = cho_solve(c, product.vec[ix])
    cond = ConditionalGaussian(fk, fdims, sk, sdims, gain, offset, 0.5 * (cov + cov.T))
    res_info = lss + lxs.T @ gain
    res_vec = product.vec[is_] - lxs.T @ offset
    res_const = product.constant - 0.5 * float(product.vec[ix] @ offset)
    return cond, QuadraticFactor(sk, sdims, 0.5 * (res_info + res_info.T), res_vec, res_const)


def marginal(density: GaussianDensity, subset: Iterable[Key]) -> GaussianDensity:
    subset = list(subset)
    if not density.keys:
        raise ValueError("density has no key layout")
    slices = [density.block_slice(k) for k in subset]
    idx = np.concatenate([np.arange(s.start, s.stop) for s in slices]).astype(int)
    dims = tuple(s.stop - s.start for s in slices)
    return GaussianDensity(density.mean[idx], density.cov[np.ix_(idx, idx)], tuple(subset), dims)


@dataclass(frozen=True)
class BayesNet:
    """Conditionals in elimination order, produced by :func:`eliminate_sequential`."""

    conditionals: tuple
    constant: float = 0.0

    def solve(self) -> dict:
        """Back-substitute in reverse elimination order; returns key -> mean."""
        values: dict = {}
        for cond in reversed(self.conditionals):
            x = cond.mean(values)
            off = _offsets(cond.frontal_dims)
            for i, k in enumerate(cond.frontal_keys):
                values[k] = x[off[i] : off[i + 1]]
        return values


def eliminate_sequential(factors: Sequence[QuadraticFactor], ordering: Sequence[Key]) -> BayesNet:
    """Variable elimination: fuse the factors touching each key, eliminate it, repeat."""
    pool = list(factors)
    conds = []
    for key in ordering:
        touching = [f for f in pool if key in f.keys]
        if not touching:
            raise SingularInformationError([key], "no factor constrains key")
        pool = [f for f in pool if key not in f.keys]
        cond, residual = eliminate(fuse(touching), [key])
        conds.append(cond)
        pool.append(residual)
    leftover = [f for f in pool if f.keys]
    if leftover:
        raise ValueError(f"ordering misses key(s): {sorted({str(k) for f in leftover for k in f.keys})}")
    return BayesNet(tuple(conds), sum(f.constant for f in pool))


def joint_density(factors: Sequence[QuadraticFactor]) -> GaussianDensity:
    """Dense posterior of a small factor collection (fuse then invert)."""
    return fuse(factors).to_density()
