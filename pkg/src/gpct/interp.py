"""Measurement-time interpolation.

States whose only job is to carry measurements ("interp" states) are removed
from the graph. Every factor that touches one is rewritten as a factor on the
two bordering states, with the interp state replaced by its GP conditional
mean given those borders. After the reduced solve the interp states are
recovered with the O(1) query.

Noise modes:

* ``"full"``: the conditional covariance is pushed into the measurement,
  R + H Sigma_tau H^T. Exact for a single interp state per bracket in the
  linear case.
* ``"simplified"``: R is kept as is.

Several interp states inside one factor are treated as independent given
the borders (their cross-covariances are dropped).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from .chain import ChainSolution, FactorGraph, Knot, motion_factor
from .gaussian import LinearFactor
from .lie import LieElement
from .lie_ct import (
    LaplaceCovariance,
    LieKnot,
    LieWnoaFactor,
    NonlinearFactor,
    NonlinearGraph,
    NonlinearSolution,
    _layout,
    assemble_linear,
    interpolate_lie,
    query_lie,
)
from .lti import LtiModel
from .query import SNAP_TOL, interp_coeffs, query_solution

NOISE_MODES = ("full", "simplified")


@dataclass(frozen=True)
class StateStamp:
    """Key(s) and time of a trajectory state; ``vel_key`` is None for vector states."""

    key: Hashable
    time: float
    vel_key: Optional[Hashable] = None

    @property
    def pose_key(self) -> Hashable:
        return self.key

    def sort_key(self):
        return (self.time, str(self.key))


def _as_stamp(s) -> StateStamp:
    if isinstance(s, StateStamp):
        return s
    if isinstance(s, LieKnot):
        return StateStamp(s.pose_key, s.time, s.vel_key)
    if isinstance(s, Knot):
        return StateStamp(s.key, s.time)
    raise TypeError(f"cannot interpret {s!r} as a state stamp")


def _as_knot(s: StateStamp) -> LieKnot:
    return LieKnot(s.key, s.vel_key, s.time)


def _check_mode(mode: str) -> None:
    if mode not in NOISE_MODES:
        raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {mode!r}")


def bracket_map(borders: Sequence, interps: Sequence) -> dict:
    """interp key -> (left border, right border), or -> border for a snapped time."""
    borders = sorted((_as_stamp(b) for b in borders), key=StateStamp.sort_key)
    if not borders:
        raise ValueError("at least one border state is required")
    times = np.array([b.time for b in borders])
    out = {}
    for s in map(_as_stamp, interps):
        i = int(np.argmin(np.abs(times - s.time)))
        if abs(times[i] - s.time) <= SNAP_TOL:
            out[s.key] = borders[i]
            continue
        if s.time < times[0] or s.time > times[-1]:
            raise ValueError(
                f"interp state {s.key!r} at t={s.time} is outside all border brackets [{times[0]}, {times[-1]}]"
            )
        j = int(np.searchsorted(times, s.time, side="right"))
        out[s.key] = (borders[j - 1], borders[j])
    return out


# ================================================================= linear


@dataclass(frozen=True)
class Snap:
    key: Hashable


def wrap_linear_factor(factor: LinearFactor, interp: Mapping, noise_mode: str = "full") -> LinearFactor:
    """Rewrite ``factor`` over bordering keys.

    ``interp`` maps each interp key to an :class:`~gpct.query.InterpCoeffs`
    (whose ``bracket`` names the border keys) or to a :class:`Snap` alias.
    """
    _check_mode(noise_mode)
    blocks: dict = {}
    rhs = np.array(factor.rhs)
    noise = np.array(factor.noise)
    for k, H in zip(factor.keys, factor.jacobians):
        c = interp.get(k)
        if c is None:
            _accumulate(blocks, k, H)
        elif isinstance(c, Snap):
            _accumulate(blocks, c.key, H)
        else:
            left, right = c.bracket
            if left is None or right is None:
                raise ValueError(f"interpolation coefficients for {k!r} do not name their borders")
            _accumulate(blocks, left, H @ c.Lambda)
            _accumulate(blocks, right, H @ c.Psi)
            rhs = rhs - H @ c.eta
            if noise_mode == "full":
                noise = noise + H @ c.Sigma @ H.T
    keys = tuple(blocks)
    label = f"wrapped:{factor.label}" if factor.label else "wrapped"
    return LinearFactor(keys, tuple(blocks[k] for k in keys), rhs, 0.5 * (noise + noise.T), label=label)


def _accumulate(blocks: dict, key, H):
    blocks[key] = blocks[key] + H if key in blocks else np.array(H)


def _interp_linear_coeffs(graph: FactorGraph, brackets: Mapping, model: LtiModel) -> dict:
    times = {k.key: k.time for k in graph.knots}
    out = {}
    for key, br in brackets.items():
        if isinstance(br, StateStamp):
            out[key] = Snap(br.key)
        else:
            out[key] = interp_coeffs(model, br[0].time, times[key], br[1].time, (br[0].key, br[1].key))
    return out


def interpolate_linear_graph(
    graph: FactorGraph, border_keys: Sequence, model: LtiModel, noise_mode: str = "full"
) -> FactorGraph:
    _check_mode(noise_mode)
    border_keys = set(border_keys)
    unknown = border_keys - set(graph.index)
    if unknown:
        raise KeyError(f"unknown border key(s): {sorted(map(str, unknown))}")
    borders = [k for k in graph.knots if k.key in border_keys]
    interps = [k for k in graph.knots if k.key not in border_keys]
    brackets = bracket_map(borders, interps)
    # coefficients are only needed where a non-motion factor touches an interp state
    needed = {k for f in graph.factors if f.label != "motion" for k in f.keys if k in brackets}
    coeffs = _interp_linear_coeffs(graph, {k: brackets[k] for k in needed}, model)
    reduced = FactorGraph(list(borders))
    existing_motion = set()
    for f in graph.factors:
        touches = any(k in brackets for k in f.keys)
        if f.label == "motion":
            if not touches:
                reduced.add(f)
                existing_motion.add(tuple(f.keys))
            continue
        reduced.add(wrap_linear_factor(f, coeffs, noise_mode) if touches else f)
    for prev, nxt in zip(reduced.knots, reduced.knots[1:]):
        if (prev.key, nxt.key) not in existing_motion:
            reduced.add(motion_factor(model, prev, nxt))
    return reduced


# ================================================================= nonlinear


@dataclass(frozen=True)
class InterpSpec:
    """An interp state and its bracket (or the border it coincides with)."""

    state: StateStamp
    left: Optional[StateStamp] = None
    right: Optional[StateStamp] = None
    snap: Optional[StateStamp] = None

    @property
    def border_keys(self) -> tuple:
        if self.snap is not None:
            return (self.snap.key, self.snap.vel_key)
        return (self.left.key, self.left.vel_key, self.right.key, self.right.vel_key)


class InterpCache:
    """Interpolated means, Jacobians and conditional covariances for one set of border values.

    Entries are dropped whenever a different ``values`` mapping is presented,
    i.e. once per linearization point. ``evaluations`` counts actual
    interpolation computations.
    """

    def __init__(self, Qc, enabled: bool = True):
        self.Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
        self.enabled = enabled
        self.evaluations = 0
        self._values = None
        self._store: dict = {}

    def reset(self) -> None:
        self._values = None
        self._store = {}

    def get(self, spec: InterpSpec, values: Mapping):
        if self.enabled:
            if values is not self._values:
                self._values = values
                self._store = {}
            hit = self._store.get(spec.state.key)
            if hit is not None:
                return hit
        a, b = spec.left, spec.right
        self.evaluations += 1
        out = interpolate_lie(
            values[a.key], values[a.vel_key], a.time, values[b.key], values[b.vel_key], b.time, spec.state.time, self.Qc
        )
        if self.enabled:
            self._store[spec.state.key] = out
        return out


class WrappedFactor(NonlinearFactor):
    """A factor on interp states re-expressed on their bordering states (and any other keys)."""

    def __init__(self, inner: NonlinearFactor, specs: Sequence[InterpSpec], cache: InterpCache, noise_mode: str = "full"):
        _check_mode(noise_mode)
        self.inner = inner
        self.cache = cache
        self.noise_mode = noise_mode
        self.label = f"wrapped:{inner.label}" if inner.label else "wrapped"
        self.specs = {}
        for s in specs:
            if s.snap is None and not s.left.time < s.state.time < s.right.time:
                raise ValueError(f"interp time {s.state.time} is not inside ({s.left.time}, {s.right.time})")
            self.specs[s.state.key] = s
            if s.state.vel_key is not None:
                self.specs[s.state.vel_key] = s
        keys: list = []
        for k in inner.keys:
            s = self.specs.get(k)
            for kk in (s.border_keys if s is not None else (k,)):
                if kk not in keys:
                    keys.append(kk)
        self.keys = tuple(keys)

    @property
    def interp_keys(self) -> set:
        return {s.state.key for s in self.specs.values()}

    def _substitute(self, values: Mapping):
        vals = dict(values)
        interps = {}
        for s in {id(s): s for s in self.specs.values()}.values():
            if s.snap is not None:
                vals[s.state.key] = values[s.snap.key]
                vals[s.state.vel_key] = values[s.snap.vel_key]
                continue
            it = self.cache.get(s, values)
            interps[s.state.key] = it
            vals[s.state.key] = it.pose
            vals[s.state.vel_key] = it.vel
        return vals, interps

    def error(self, values):
        vals, _ = self._substitute(values)
        return self.inner.error(vals)

    def _linear_parts(self, values):
        vals, interps = self._substitute(values)
        e = self.inner.error(vals)
        H_inner = self.inner.jacobians(vals)
        p = e.shape[0]
        blocks = {k: np.zeros((p, _dim(values[k]))) for k in self.keys}
        per_state: dict = {}
        for k, H in zip(self.inner.keys, H_inner):
            s = self.specs.get(k)
            if s is None:
                blocks[k] += H
                continue
            if s.snap is not None:
                blocks[s.snap.key if k == s.state.key else s.snap.vel_key] += H
                continue
            it = interps[s.state.key]
            m = it.pose.dof
            rows = slice(0, m) if k == s.state.key else slice(m, 2 * m)
            J = it.jacobian[rows]
            for i, bk in enumerate(s.border_keys):
                blocks[bk] += H @ J[:, i * m : (i + 1) * m]
            Hs = per_state.setdefault(s.state.key, np.zeros((p, 2 * m)))
            Hs[:, rows] += H
        R = np.array(self.inner.noise(vals))
        if self.noise_mode == "full":
            for key, Hs in per_state.items():
                R = R + Hs @ interps[key].cov @ Hs.T
        return e, [blocks[k] for k in self.keys], 0.5 * (R + R.T)

    def jacobians(self, values):
        return self._linear_parts(values)[1]

    def noise(self, values):
        if self.noise_mode == "simplified":
            vals, _ = self._substitute(values)
            return self.inner.noise(vals)
        return self._linear_parts(values)[2]

    def linearize(self, values):
        e, H, R = self._linear_parts(values)
        return LinearFactor(self.keys, tuple(H), -e, R, label=self.label)


def _dim(v) -> int:
    return v.dof if isinstance(v, LieElement) else int(np.asarray(v).shape[0])


def wrap_factor(inner: NonlinearFactor, specs: Sequence[InterpSpec], Qc, noise_mode: str = "full", cache=None):
    return WrappedFactor(inner, specs, cache if cache is not None else InterpCache(Qc), noise_mode)


def _specs_for(brackets: Mapping, stamps: Mapping) -> dict:
    out = {}
    for key, br in brackets.items():
        st = stamps[key]
        if isinstance(br, StateStamp):
            out[key] = InterpSpec(st, snap=br)
        else:
            out[key] = InterpSpec(st, br[0], br[1])
    return out


def interpolate_factor_graph(graph, border_set: Sequence, interp_set: Sequence, model: LtiModel, noise_mode: str = "full", use_cache: bool = True):
    """Reduce ``graph`` onto the border states.

    Linear :class:`~gpct.chain.FactorGraph` inputs take border keys and return
    a linear graph; :class:`~gpct.lie_ct.NonlinearGraph` inputs take
    :class:`~gpct.lie_ct.LieKnot` or :class:`StateStamp` lists and return a
    nonlinear graph whose ``cache`` attribute is the shared interpolation cache.
    """
    if isinstance(graph, FactorGraph):
        keys = [b.key if isinstance(b, (Knot, StateStamp)) else b for b in border_set]
        return interpolate_linear_graph(graph, keys, model, noise_mode)
    _check_mode(noise_mode)
    if not model.wnoa:
        raise ValueError("Lie-group interpolation needs a WNOA model")
    borders = sorted(map(_as_stamp, border_set), key=StateStamp.sort_key)
    interps = sorted(map(_as_stamp, interp_set), key=StateStamp.sort_key)
    stamps = {s.key: s for s in interps}
    brackets = bracket_map(borders, interps)
    specs = _specs_for(brackets, stamps)
    by_key = {}
    for s in specs.values():
        by_key[s.state.key] = s
        by_key[s.state.vel_key] = s
    cache = InterpCache(model.Qc, enabled=use_cache)
    reduced = NonlinearGraph()
    interp_keys = set(by_key)
    reduced.values = {k: v for k, v in graph.values.items() if k not in interp_keys}
    existing = set()
    for f in graph.factors:
        touched = [by_key[k] for k in f.keys if k in by_key]
        if isinstance(f, LieWnoaFactor):
            if not touched:
                reduced.add(f)
                existing.add((f.prev.pose_key, f.next.pose_key))
            continue
        if touched:
            uniq = list({id(s): s for s in touched}.values())
            reduced.add(WrappedFactor(f, uniq, cache, noise_mode))
        else:
            reduced.add(f)
    for a, b in zip(borders, borders[1:]):
        if (a.key, b.key) not in existing:
            reduced.add(LieWnoaFactor(_as_knot(a), _as_knot(b), model.Qc))
    reduced.cache = cache
    return reduced


def reduced_variable_count(graph) -> int:
    if isinstance(graph, FactorGraph):
        return len(graph.knots)
    return len(graph.values)


# ================================================================= recovery


@dataclass(frozen=True)
class StateEstimate:
    time: float
    key: Hashable
    mean: object  # vector, or (pose, velocity)
    cov: np.ndarray
    flag: str  # "estimated" | "interpolated"
    bubbling: float = 1.0


def _bubbling(cov, left_cov, right_cov) -> float:
    ref = max(np.trace(left_cov), np.trace(right_cov))
    return float(np.trace(cov) / ref) if ref > 0 else float("inf")


def update_interp_values(solution, border_set: Sequence, interp_set: Sequence, model: LtiModel) -> list:
    """Estimates for every state: borders passed through, interp states queried.

    The bubbling diagnostic of an interp state is trace(P_tau) divided by the
    larger trace of its two border covariances.
    """
    borders = sorted(map(_as_stamp, border_set), key=StateStamp.sort_key)
    interps = sorted(map(_as_stamp, interp_set), key=StateStamp.sort_key)
    brackets = bracket_map(borders, interps)
    out = []
    if isinstance(solution, ChainSolution):
        for b in borders:
            i = solution.index_of(b.key)
            out.append(StateEstimate(b.time, b.key, solution.means[i], solution.covs[i], "estimated"))
        index = {key: i for i, key in enumerate(solution.keys)}
        for s in interps:
            br = brackets[s.key]
            if isinstance(br, StateStamp):
                q = query_solution(solution, model, s.time)
                out.append(StateEstimate(s.time, s.key, q.density.mean, q.density.cov, "interpolated"))
                continue
            k = index[br[1].key]
            c = interp_coeffs(model, br[0].time, s.time, br[1].time)
            mean, cov = solution.pair_arrays(k)
            g = c.gain
            P = c.Sigma + g @ cov @ g.T
            P = 0.5 * (P + P.T)
            out.append(
                StateEstimate(
                    s.time, s.key, c.eta + g @ mean, P, "interpolated", _bubbling(P, solution.covs[k - 1], solution.covs[k])
                )
            )
    elif isinstance(solution, NonlinearSolution):
        knots = [_as_knot(b) for b in borders]
        border_cov = {}
        for b in borders:
            cov = solution.joint([b.key, b.vel_key])
            border_cov[b.key] = cov
            out.append(StateEstimate(b.time, b.key, (solution.values[b.key], np.asarray(solution.values[b.vel_key])), cov, "estimated"))
        for s in interps:
            q = query_lie(solution, knots, model.Qc, s.time)
            br = brackets[s.key]
            bub = 1.0 if isinstance(br, StateStamp) else _bubbling(q.cov, border_cov[br[0].key], border_cov[br[1].key])
            out.append(StateEstimate(s.time, s.key, (q.pose, q.vel), q.cov, "interpolated", bub))
    else:
        raise TypeError(f"unsupported solution type {type(solution).__name__}")
    out.sort(key=lambda e: (e.time, str(e.key)))
    return out


def laplace_covariances(graph, means: Mapping, keys: Optional[Sequence] = None) -> dict:
    """Marginal covariances from the information of ``graph`` linearized at ``means``."""
    if isinstance(graph, FactorGraph):
        factors = graph.factors
        keys = [k.key for k in graph.knots] if keys is None else list(keys)
        values = {k: np.asarray(means[k], dtype=float) for k in keys}
        linear = list(factors)
    else:
        keys = list(means) if keys is None else list(keys)
        values = dict(means)
        linear = [f.linearize(values) for f in graph.factors]
    pos, off = _layout(values, keys)
    info, _ = assemble_linear(linear, keys, off, pos)
    return LaplaceCovariance(info, keys, off).marginals()


def cached_linearization(graph: NonlinearGraph, values: Optional[Mapping] = None, use_cache: bool = True):
    """(information, vector, keys) of the reduced system at ``values``.

    Toggles the graph's interpolation cache for the duration of the call.
    """
    values = dict(graph.values if values is None else values)
    cache = getattr(graph, "cache", None)
    previous = cache.enabled if cache is not None else None
    if cache is not None:
        cache.enabled = use_cache
        cache.reset()
    try:
        keys = list(values)
        pos, off = _layout(values, keys)
        linear = [f.linearize(values) for f in graph.factors]
        info, vec = assemble_linear(linear, keys, off, pos)
    finally:
        if cache is not None:
            cache.enabled = previous
    return info, vec, keys
