"""Linear-Gaussian batch solve over a temporal chain of knots.

The information matrix of a GP prior built from an LTI SDE, plus measurements
at the knots, is block-tridiagonal. :func:`solve_chain` eliminates knots
forward in time and back-substitutes (means, marginal covariances and
consecutive cross-covariances) in O(K). :func:`rts_smooth` runs the classic
Rauch-Tung-Striebel recursions on the same problem as an independent check.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular

from .gaussian import GaussianDensity, LinearFactor, QuadraticFactor, SingularInformationError, fuse, is_spd
from .lti import LtiModel, discretize

TIME_MATCH_TOL = 1e-9


@dataclass(frozen=True)
class Knot:
    key: Hashable
    time: float
    dim: int


@dataclass(frozen=True)
class MeasurementFactor:
    """y = C x(t) + n,  n ~ N(0, R). Attached by ``key``, or by ``time`` if no key is given."""

    C: np.ndarray
    R: np.ndarray
    y: np.ndarray
    key: Optional[Hashable] = None
    time: Optional[float] = None

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if C.shape[0] != y.shape[0] or R.shape != (y.shape[0], y.shape[0]):
            raise ValueError(f"non-conformable measurement: C {C.shape}, R {R.shape}, y {y.shape}")
        if not is_spd(R):
            raise ValueError("measurement noise R must be SPD")
        if self.key is None and self.time is None:
            raise ValueError("a measurement needs a key or a time")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "y", y)


@dataclass
class FactorGraph:
    """Linear factor graph over time-stamped knots."""

    knots: list
    factors: list = field(default_factory=list)

    def __post_init__(self):
        self.knots = sorted(self.knots, key=lambda k: k.time)
        times = [k.time for k in self.knots]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("knot times must be strictly increasing")
        self._dims = {k.key: k.dim for k in self.knots}
        if len(self._dims) != len(self.knots):
            raise ValueError("knot keys must be unique")

    @property
    def dims(self) -> dict:
        return self._dims

    @property
    def index(self) -> dict:
        return {k.key: i for i, k in enumerate(self.knots)}

    def add(self, factor: LinearFactor) -> None:
        dims = self.dims
        for k, d in zip(factor.keys, factor.dims):
            if k not in dims:
                raise KeyError(f"factor references unknown key {k!r}")
            if dims[k] != d:
                raise ValueError(f"dimension mismatch for key {k!r}: {dims[k]} vs {d}")
        self.factors.append(factor)

    def cost(self, values) -> float:
        return float(sum(f.cost(values) for f in self.factors))


@dataclass(frozen=True)
class ChainSolution:
    times: np.ndarray
    keys: tuple
    means: list
    covs: list
    cross_covs: list  # cross_covs[k-1] = P_{k,k-1}
    cost: float
    filtered: Optional[tuple] = field(default=None, compare=False, repr=False)

    def index_of(self, key) -> int:
        return self.keys.index(key)

    def marginal(self, i: int) -> GaussianDensity:
        return GaussianDensity(self.means[i], self.covs[i], (self.keys[i],))

    def pair(self, k: int) -> GaussianDensity:
        """Joint posterior of knots k-1 and k."""
        mean, cov = self.pair_arrays(k)
        dims = (len(self.means[k - 1]), len(self.means[k]))
        return GaussianDensity(mean, cov, (self.keys[k - 1], self.keys[k]), dims)

    def pair_arrays(self, k: int):
        a, b = self.means[k - 1], self.means[k]
        na = len(a)
        cov = np.empty((na + len(b), na + len(b)))
        cov[:na, :na] = self.covs[k - 1]
        cov[na:, na:] = self.covs[k]
        cov[na:, :na] = self.cross_covs[k - 1]
        cov[:na, na:] = self.cross_covs[k - 1].T
        return np.concatenate([a, b]), 0.5 * (cov + cov.T)

    def values(self) -> dict:
        return {k: m for k, m in zip(self.keys, self.means)}


def motion_factor(model: LtiModel, prev: Knot, nxt: Knot) -> LinearFactor:
    """|| x_k - Phi x_{k-1} - v ||^2_Q between consecutive knots."""
    blocks = discretize(model, prev.time, nxt.time)
    return LinearFactor(
        (prev.key, nxt.key), (-blocks.Phi, np.eye(model.n)), blocks.v_disc, blocks.Q_disc, label="motion"
    )


def _resolve(meas: MeasurementFactor, knots: Sequence[Knot]) -> Knot:
    if meas.key is not None:
        for k in knots:
            if k.key == meas.key:
                return k
        raise KeyError(f"measurement references unknown key {meas.key!r}")
    times = np.array([k.time for k in knots])
    i = int(np.argmin(np.abs(times - meas.time)))
    if abs(times[i] - meas.time) > TIME_MATCH_TOL:
        raise ValueError(
            f"measurement at t={meas.time} does not coincide with a knot; use interpolation factors instead"
        )
    return knots[i]


def build_chain(
    model: LtiModel,
    knots: Sequence[Knot],
    prior: GaussianDensity,
    measurements: Sequence[MeasurementFactor] = (),
) -> FactorGraph:
    if not knots:
        raise ValueError("at least one knot is required")
    graph = FactorGraph(list(knots))
    first = graph.knots[0]
    if prior.dim != first.dim or first.dim != model.n:
        raise ValueError(f"prior dimension {prior.dim} does not match knot dimension {first.dim}")
    graph.add(LinearFactor((first.key,), (np.eye(first.dim),), prior.mean, prior.cov, label="prior"))
    for prev, nxt in zip(graph.knots, graph.knots[1:]):
        graph.add(motion_factor(model, prev, nxt))
    for meas in measurements:
        knot = _resolve(meas, graph.knots)
        graph.add(LinearFactor((knot.key,), (meas.C,), meas.y, meas.R, label="measurement"))
    return graph


def assemble_information(graph: FactorGraph):
    """Sparse information matrix, information vector and block offsets of the whole graph."""
    idx = graph.index
    off = np.concatenate([[0], np.cumsum([k.dim for k in graph.knots])]).astype(int)
    rows, cols, data = [], [], []
    vec = np.zeros(off[-1])
    for f in graph.factors:
        q = f.to_quadratic()
        gi = np.concatenate([np.arange(off[idx[k]], off[idx[k] + 1]) for k in f.keys])
        r, c = np.meshgrid(gi, gi, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        data.append(q.info.ravel())
        vec[gi] += q.vec
    n = off[-1]
    info = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    info.eliminate_zeros()
    return info, vec, off


def nonzero_block_pattern(info: sp.spmatrix, offsets: np.ndarray) -> set:
    """Set of (i, j) block indices holding at least one structurally stored nonzero."""
    coo = sp.coo_matrix(info)
    bi = np.searchsorted(offsets, coo.row, side="right") - 1
    bj = np.searchsorted(offsets, coo.col, side="right") - 1
    mask = coo.data != 0
    return set(zip(bi[mask].tolist(), bj[mask].tolist()))


def _whitened_rows(graph: FactorGraph):
    """Noise-whitened rows of every factor, grouped by the earliest knot they touch.

    Each entry is (H_k, H_{k+1} or None, b) with rows pre-multiplied by L^-1, R = L L^T.
    """
    idx = graph.index
    K1 = len(graph.knots)
    rows = [[] for _ in range(K1)]
    linked = np.zeros(max(K1 - 1, 0), dtype=bool)
    for f in graph.factors:
        L = np.linalg.cholesky(f.noise)
        w = solve_triangular(L, np.hstack(f.jacobians + (f.rhs[:, None],)), lower=True, check_finite=False)
        cuts = np.cumsum(f.dims)[:-1]
        *wh, wb = np.hsplit(w, list(cuts) + [w.shape[1] - 1])
        wb = wb[:, 0]
        pos = [idx[k] for k in f.keys]
        if len(pos) == 1:
            rows[pos[0]].append((wh[0], None, wb))
        elif len(pos) == 2:
            (lo, h_lo), (hi, h_hi) = sorted(zip(pos, wh), key=lambda t: t[0])
            if hi - lo != 1:
                raise ValueError(f"factor on {f.keys} does not connect consecutive knots; not a chain")
            rows[lo].append((h_lo, h_hi, wb))
            linked[lo] = True
        else:
            raise ValueError("chain factors must be unary or binary")
    if not linked.all():
        gap = int(np.flatnonzero(~linked)[0])
        raise ValueError(
            f"disconnected chain: no factor links {graph.knots[gap].key!r} and {graph.knots[gap + 1].key!r}"
        )
    return rows


def solve_chain(graph: FactorGraph) -> ChainSolution:
    """Square-root elimination: QR of the whitened rows at each knot, forward in time.

    Working on square roots rather than information blocks keeps closely spaced
    knots (tiny, nearly singular process-noise blocks) accurate.
    """
    rows = _whitened_rows(graph)
    dims = [k.dim for k in graph.knots]
    K1 = len(dims)
    S_inv, G, o = [], [], []
    carry = None
    for k in range(K1):
        d = dims[k]
        dn = dims[k + 1] if k + 1 < K1 else 0
        blocks = []
        if carry is not None:
            blocks.append(np.hstack([carry[:, :d], np.zeros((carry.shape[0], dn)), carry[:, d:]]))
        for h, h_next, b in rows[k]:
            blocks.append(np.hstack([h, np.zeros((h.shape[0], dn)) if h_next is None else h_next, b[:, None]]))
        M = np.vstack(blocks)
        R = np.linalg.qr(M, mode="r")
        diag = np.abs(np.diag(R[:d, :d])) if R.shape[0] >= d else np.zeros(1)
        if R.shape[0] < d or diag.min() <= 1e-13 * max(1.0, float(np.abs(M[:, :d]).max())):
            raise SingularInformationError([graph.knots[k].key], "chain elimination hit a singular block")
        r_inv = solve_triangular(R[:d, :d], np.eye(d), check_finite=False)
        S_inv.append(r_inv @ r_inv.T)
        o.append(r_inv @ R[:d, -1])
        if k + 1 < K1:
            G.append(-r_inv @ R[:d, d : d + dn])
            carry = R[d:, d:]
    means = [None] * K1
    covs = [None] * K1
    cross = [None] * (K1 - 1)
    means[-1] = o[-1]
    covs[-1] = S_inv[-1]
    for k in range(K1 - 2, -1, -1):
        means[k] = G[k] @ means[k + 1] + o[k]
        P = S_inv[k] + G[k] @ covs[k + 1] @ G[k].T
        covs[k] = 0.5 * (P + P.T)
        cross[k] = covs[k + 1] @ G[k].T
    keys = tuple(k.key for k in graph.knots)
    values = dict(zip(keys, means))
    return ChainSolution(
        np.array([k.time for k in graph.knots]), keys, means, covs, cross, graph.cost(values)
    )


def rts_smooth(
    model: LtiModel,
    knots: Sequence[Knot],
    prior: GaussianDensity,
    measurements: Sequence[MeasurementFactor] = (),
) -> ChainSolution:
    graph = build_chain(model, knots, prior, measurements)
    knots = graph.knots
    per_knot = defaultdict(list)
    for meas in measurements:
        per_knot[_resolve(meas, knots).key].append(meas)

    def update(x, P, key):
        ms = per_knot.get(key)
        if not ms:
            return x, P
        C = np.vstack([m.C for m in ms])
        R = _block_diag([m.R for m in ms])
        y = np.concatenate([m.y for m in ms])
        S = C @ P @ C.T + R
        gain = np.linalg.solve(S, C @ P).T  # P C^T S^-1
        Pf = (np.eye(len(x)) - gain @ C) @ P
        return x + gain @ (y - C @ x), 0.5 * (Pf + Pf.T)

    xf, Pf, xp, Pp, Phis = [], [], [None], [None], [None]
    x, P = update(np.asarray(prior.mean), np.asarray(prior.cov), knots[0].key)
    xf.append(x)
    Pf.append(P)
    for prev, nxt in zip(knots, knots[1:]):
        blk = discretize(model, prev.time, nxt.time)
        x_pred = blk.Phi @ xf[-1] + blk.v_disc
        P_pred = blk.Phi @ Pf[-1] @ blk.Phi.T + blk.Q_disc
        P_pred = 0.5 * (P_pred + P_pred.T)
        xp.append(x_pred)
        Pp.append(P_pred)
        Phis.append(blk.Phi)
        x, P = update(x_pred, P_pred, nxt.key)
        xf.append(x)
        Pf.append(P)
    K1 = len(knots)
    xs = [None] * K1
    Ps = [None] * K1
    cross = [None] * (K1 - 1)
    xs[-1], Ps[-1] = xf[-1], Pf[-1]
    for k in range(K1 - 1, 0, -1):
        smoother_gain = np.linalg.solve(Pp[k], Phis[k] @ Pf[k - 1]).T  # P_{k-1,f} A^T Pcheck_{k,f}^-1
        xs[k - 1] = xf[k - 1] + smoother_gain @ (xs[k] - xp[k])
        P = Pf[k - 1] + smoother_gain @ (Ps[k] - Pp[k]) @ smoother_gain.T
        Ps[k - 1] = 0.5 * (P + P.T)
        cross[k - 1] = Ps[k] @ smoother_gain.T
    keys = tuple(k.key for k in knots)
    return ChainSolution(
        np.array([k.time for k in knots]), keys, xs, Ps, cross, graph.cost(dict(zip(keys, xs))), (xf, Pf)
    )


def _block_diag(mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    i = 0
    for m in mats:
        d = m.shape[0]
        out[i : i + d, i : i + d] = m
        i += d
    return out


def solve_dense(graph: FactorGraph) -> GaussianDensity:
    """Joint posterior by dense inversion of the fused information (small problems only)."""
    joint = fuse([f.to_quadratic() for f in graph.factors])
    order = [k.key for k in graph.knots]
    dims = graph.dims
    missing = [k for k in order if k not in joint.keys]
    if missing:
        raise SingularInformationError(missing, "no factor touches key")
    idx = joint.index(order)
    info = joint.info[np.ix_(idx, idx)]
    q = QuadraticFactor(tuple(order), tuple(dims[k] for k in order), info, joint.vec[idx], joint.constant)
    return q.to_density()
