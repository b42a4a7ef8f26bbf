"""Command-line front end: ``gpct simulate | solve | reduce | query | metrics``.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical failure
or solver non-convergence (outputs are still written, flagged).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .chain import ChainSolution, Knot, MeasurementFactor, build_chain, solve_chain
from .datasets import (
    MeasurementRecord,
    gen_se2_arc,
    gen_se2_landmarks,
    gen_se3_traj,
    gen_sinusoid_1d,
    metrics,
)
from .gaussian import GaussianDensity, SingularInformationError
from .interp import StateEstimate, interpolate_factor_graph, update_interp_values
from .lie import Group, InjectivityError, pose_from_vector, pose_to_vector
from .lie_ct import (
    BearingRangeFactor,
    DegenerateGeometryError,
    LieKnot,
    NonlinearGraph,
    PosePrior,
    SolverConfig,
    add_motion_prior,
    constant_velocity_init,
    find_bracket,
    gauss_newton,
    query_lie_pair,
)
from .lti import wnoa_model
from .query import query_solution

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

DATASETS = ("sinusoid", "se2_arc", "se3", "se2_landmarks")


class ValidationError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ================================================================= config


@dataclass
class RunConfig:
    dataset: str = "sinusoid"
    seed: Optional[int] = None
    # sinusoid
    rate: float = 10.0
    duration: float = 20.0
    meas_noise_sd: float = 0.1
    meas_interval: Optional[float] = None
    knot_rate: Optional[float] = None
    # Lie datasets
    n_knots: int = 60
    dt: float = 0.1
    data_noise: str = "noisy"
    twist: list = field(default_factory=lambda: [1.0, 0.0, 0.5])
    sd_trans: float = 0.05
    sd_rot: float = 0.02
    n_landmarks: int = 8
    sd_bearing: float = 0.02
    sd_range: float = 0.05
    max_obs: int = 3
    # model and solver
    qc: Optional[list] = None
    prior_sd: Optional[list] = None
    interp_interval: int = 10
    noise_mode: str = "full"
    max_iterations: int = 100
    tolerance: float = 1e-8
    damping: str = "gn"
    init: str = "cv"
    init_velocity: Optional[list] = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValidationError(f"unknown config field(s): {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @property
    def group(self) -> Optional[Group]:
        return {"se2_arc": Group.SE2, "se2_landmarks": Group.SE2, "se3": Group.SE3}.get(self.dataset)

    @property
    def m(self) -> int:
        return 1 if self.group is None else self.group.dof

    def qc_matrix(self) -> np.ndarray:
        if self.qc is not None:
            qc = self.qc
        elif self.dataset == "se2_landmarks":
            qc = [0.2, 0.05, 0.2]
        else:
            qc = [1.0] * self.m
        return np.diag(np.asarray(qc, dtype=float))

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ValidationError(msg)

        need(self.dataset in DATASETS, f"dataset must be one of {DATASETS}")
        need(self.seed is None or (isinstance(self.seed, int) and 0 <= self.seed < 2**64), "seed must be a 64-bit unsigned integer")
        need(self.rate > 0, "rate must be positive")
        need(self.duration > 0, "duration must be positive")
        need(self.meas_noise_sd >= 0, "meas_noise_sd must be non-negative")
        need(self.meas_interval is None or self.meas_interval > 0, "meas_interval must be positive")
        need(self.knot_rate is None or self.knot_rate > 0, "knot_rate must be positive")
        need(isinstance(self.n_knots, int) and self.n_knots >= 2, "n_knots must be an integer >= 2")
        need(self.dt > 0, "dt must be positive")
        need(self.data_noise in ("none", "noisy"), "data_noise must be 'none' or 'noisy'")
        need(isinstance(self.interp_interval, int) and self.interp_interval >= 1, "interp_interval must be an integer >= 1")
        need(self.noise_mode in ("full", "simplified"), "noise_mode must be 'full' or 'simplified'")
        need(isinstance(self.max_iterations, int) and self.max_iterations >= 1, "max_iterations must be >= 1")
        need(self.tolerance >= 0, "tolerance must be non-negative")
        need(self.damping in ("gn", "lm"), "damping must be 'gn' or 'lm'")
        need(self.init in ("cv", "truth"), "init must be 'cv' or 'truth'")
        if self.qc is not None:
            need(len(self.qc) == self.m and all(q > 0 for q in self.qc), f"qc must hold {self.m} positive entries")
        if self.prior_sd is not None:
            need(len(self.prior_sd) == 2 * self.m and all(s > 0 for s in self.prior_sd), f"prior_sd must hold {2 * self.m} positive entries")
        if self.group is Group.SE2:
            need(len(self.twist) == 3, "twist must have 3 entries for SE(2)")
        if self.init_velocity is not None:
            need(len(self.init_velocity) == self.m, f"init_velocity must have {self.m} entries")


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValidationError(f"config is not valid JSON: {err}") from None
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_dict(data)
    except TypeError as err:
        raise ValidationError(str(err)) from None


# ================================================================= file I/O


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    atomic_write(path, buf.getvalue())


def write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path} is empty")
    return rows[0], rows[1:]


def upper(P: np.ndarray) -> list:
    i, j = np.triu_indices(P.shape[0])
    return [float(v) for v in P[i, j]]


def from_upper(vals: Sequence[float], n: int) -> np.ndarray:
    P = np.zeros((n, n))
    i, j = np.triu_indices(n)
    P[i, j] = vals
    P[j, i] = vals
    return P


def upper_names(prefix: str, n: int) -> list:
    return [f"{prefix}_{i}_{j}" for i, j in zip(*np.triu_indices(n))]


def state_vector(state) -> np.ndarray:
    if isinstance(state, tuple):
        return np.concatenate([pose_to_vector(state[0]), np.asarray(state[1], dtype=float)])
    return np.asarray(state, dtype=float)


def state_from_vector(v: np.ndarray, group: Optional[Group]):
    if group is None:
        return np.asarray(v, dtype=float)
    m = group.dof
    return (pose_from_vector(v[:m], group), np.asarray(v[m:], dtype=float))


def write_truth(out: Path, traj, group) -> None:
    n = 2 * (group.dof if group else 1)
    header = ["t"] + [f"x_{i}" for i in range(n)]
    rows = [[float(t)] + list(map(float, state_vector(s))) for t, s in zip(traj.times, traj.states)]
    write_csv(out / "truth.csv", header, rows)
    if traj.landmarks is not None:
        write_csv(out / "landmarks.csv", ["id", "x", "y"], [[i, float(p[0]), float(p[1])] for i, p in enumerate(traj.landmarks)])


def read_truth(path: Path):
    header, rows = read_csv(path)
    data = np.array([[float(v) for v in r] for r in rows])
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValidationError(f"{path}: malformed truth file")
    return data[:, 0], data[:, 1:]


def write_meas(out: Path, log) -> None:
    p = log.records[0].value.shape[0]
    header = ["t", "sensor"] + [f"v_{i}" for i in range(p)] + upper_names("c", p)
    rows = []
    for r in log.records:
        sensor = r.sensor if r.target is None else f"{r.sensor}:{r.target}"
        rows.append([float(r.time), sensor] + list(map(float, r.value)) + upper(r.cov))
    write_csv(out / "meas.csv", header, rows)


def read_meas(path: Path) -> list:
    header, rows = read_csv(path)
    p = sum(1 for h in header if h.startswith("v_"))
    if len(header) != 2 + p + p * (p + 1) // 2:
        raise ValidationError(f"{path}: header does not match the measurement schema")
    out = []
    for r in rows:
        sensor, _, target = r[1].partition(":")
        vals = [float(v) for v in r[2:]]
        try:
            out.append(MeasurementRecord(float(r[0]), sensor, vals[:p], from_upper(vals[p:], p), int(target) if target else None))
        except ValueError as err:
            raise ValidationError(f"{path}: {err}") from None
    return out


# ================================================================= simulate


def _on_grid(t: float, step: float, tol: float = 1e-9) -> bool:
    return abs(t / step - round(t / step)) < tol


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    if cfg.seed is None:
        raise ValidationError("--seed is required for simulate")
    if cfg.dataset == "sinusoid":
        traj, log = gen_sinusoid_1d(cfg.rate, cfg.duration, cfg.meas_noise_sd, cfg.seed)
        if cfg.meas_interval is not None:
            log.records = [r for r in log.records if _on_grid(r.time, cfg.meas_interval)]
    elif cfg.dataset == "se2_arc":
        traj, log = gen_se2_arc(cfg.n_knots, cfg.data_noise, cfg.seed, cfg.dt, cfg.twist, cfg.sd_trans, cfg.sd_rot)
    elif cfg.dataset == "se3":
        traj, log = gen_se3_traj(cfg.n_knots, cfg.data_noise, cfg.seed, cfg.dt, None, cfg.sd_trans, cfg.sd_rot)
    else:
        traj, log = gen_se2_landmarks(
            cfg.n_knots, cfg.dt, cfg.n_landmarks, np.diag(cfg.qc_matrix()), sd_bearing=cfg.sd_bearing,
            sd_range=cfg.sd_range, max_obs=cfg.max_obs, seed=cfg.seed,
        )
    write_truth(out, traj, cfg.group)
    write_meas(out, log)
    return {"states": len(traj.times), "measurements": len(log)}


# ================================================================= solve


@dataclass
class SolveResult:
    estimates: list  # StateEstimate
    cross: list  # (t_prev, t_next, Cov(x_next, x_prev))
    cost_trace: list
    converged: bool
    iterations: int
    n_variables: int
    timing: dict
    message: str = ""
    landmarks: Optional[dict] = None


def _borders(n: int, interval: int) -> list:
    idx = list(range(0, n, interval))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    return idx


def solve_linear(cfg: RunConfig, records: list, reduced: bool) -> SolveResult:
    model = wnoa_model(cfg.qc_matrix())
    m = cfg.m
    times = np.unique([r.time for r in records])
    if cfg.knot_rate is not None:
        n = int(round((times[-1] - times[0]) * cfg.knot_rate))
        grid = times[0] + np.arange(n + 1) / cfg.knot_rate
        grid = grid[grid <= times[-1] + 1e-9]
        # grid points within 1e-9 of a measurement time take the measurement time
        near = np.abs(grid[:, None] - times[None, :]).min(axis=1) < 1e-9
        times = np.unique(np.concatenate([times, grid[~near]]))
    knots = [Knot(i, float(t), 2 * m) for i, t in enumerate(times)]
    y0 = [r for r in records if r.time == times[0]][0].value
    prior_sd = np.asarray(cfg.prior_sd if cfg.prior_sd is not None else [1.0] * (2 * m))
    prior = GaussianDensity(np.concatenate([y0[:m], np.zeros(m)]), np.diag(prior_sd**2))
    C = np.hstack([np.eye(m), np.zeros((m, m))])
    meas = [MeasurementFactor(C[: r.value.shape[0]], r.cov, r.value, time=r.time) for r in records]
    t0 = time.perf_counter()
    graph = build_chain(model, knots, prior, meas)
    if reduced:
        bidx = _borders(len(knots), cfg.interp_interval)
        border_keys = [knots[i].key for i in bidx]
        rgraph = interpolate_factor_graph(graph, border_keys, [], model, cfg.noise_mode)
        ts = time.perf_counter()
        sol = solve_chain(rgraph)
        t_solve = time.perf_counter() - ts
        interps = [k for k in knots if k.key not in set(border_keys)]
        est = update_interp_values(sol, [knots[i] for i in bidx], interps, model)
    else:
        ts = time.perf_counter()
        sol = solve_chain(graph)
        t_solve = time.perf_counter() - ts
        est = [StateEstimate(float(t), k, mu, P, "estimated") for t, k, mu, P in zip(sol.times, sol.keys, sol.means, sol.covs)]
    total = time.perf_counter() - t0
    cross = [(float(sol.times[k - 1]), float(sol.times[k]), sol.cross_covs[k - 1]) for k in range(1, len(sol.times))]
    return SolveResult(est, cross, [sol.cost], True, 1, len(sol.keys), {"total": total, "solve": [t_solve]})


def _landmark_init(records, values, knots, group) -> dict:
    out = {}
    by_time = {k.time: k for k in knots}
    for r in records:
        if r.target is None or ("l", r.target) in out:
            continue
        T = values[by_time[r.time].pose_key]
        b, rng = r.value
        out[("l", r.target)] = T.act([rng * np.cos(b), rng * np.sin(b)])
    return out


def solve_lie(cfg: RunConfig, records: list, reduced: bool, truth=None) -> SolveResult:
    group = cfg.group
    m = group.dof
    Qc = cfg.qc_matrix()
    model = wnoa_model(Qc)
    times = np.unique([r.time for r in records])
    knots = [LieKnot(("T", i), ("w", i), float(t)) for i, t in enumerate(times)]
    by_time = {k.time: k for k in knots}
    graph = NonlinearGraph()
    add_motion_prior(graph, knots, Qc)
    first_pose = None
    for r in records:
        kn = by_time[r.time]
        if r.sensor == "pose":
            Z = pose_from_vector(r.value, group)
            graph.add(PosePrior(kn.pose_key, Z, r.cov))
            if first_pose is None and r.time == times[0]:
                first_pose = Z
        elif r.sensor == "bearing_range":
            graph.add(BearingRangeFactor(kn.pose_key, ("l", r.target), r.value[0], r.value[1], r.cov))
        else:
            raise ValidationError(f"unsupported sensor {r.sensor!r} for a Lie-group dataset")
    if cfg.init == "truth":
        if truth is None:
            raise ValidationError("init 'truth' needs truth.csv next to meas.csv")
        tt, tx = truth[0], truth[1]
        values = {}
        for kn in knots:
            i = int(np.argmin(np.abs(tt - kn.time)))
            if abs(tt[i] - kn.time) > 1e-9:
                raise ValidationError(f"no truth row at t={kn.time}")
            T, w = state_from_vector(tx[i], group)
            values[kn.pose_key], values[kn.vel_key] = T, w
        landmarks = truth[2] if len(truth) > 2 else None
        if landmarks is not None:
            seen = {r.target for r in records if r.target is not None}
            values.update({("l", int(i)): np.asarray(p) for i, p in landmarks.items() if i in seen})
    else:
        values = constant_velocity_init(knots, group, first_pose, cfg.init_velocity)
    values.update({k: v for k, v in _landmark_init(records, values, knots, group).items() if k not in values})
    graph.values = values
    # weak priors anchor the first state when nothing else does
    if not any(isinstance(f, PosePrior) for f in graph.factors):
        graph.add(PosePrior(knots[0].pose_key, values[knots[0].pose_key], 1e-6 * np.eye(m)))
    solver = SolverConfig(max_iterations=cfg.max_iterations, rel_tol=cfg.tolerance, damping=cfg.damping)
    t0 = time.perf_counter()
    if reduced:
        bidx = _borders(len(knots), cfg.interp_interval)
        borders = [knots[i] for i in bidx]
        interps = [k for i, k in enumerate(knots) if i not in set(bidx)]
        rgraph = interpolate_factor_graph(graph, borders, interps, model, cfg.noise_mode)
        sol = gauss_newton(rgraph, config=solver)
        est = update_interp_values(sol, borders, interps, model)
        est_knots = borders
    else:
        sol = gauss_newton(graph, config=solver)
        est = update_interp_values(sol, knots, [], model)
        est_knots = knots
    cross = []
    for a, b in zip(est_knots, est_knots[1:]):
        J = sol.joint([a.pose_key, a.vel_key, b.pose_key, b.vel_key])
        cross.append((a.time, b.time, J[2 * m :, : 2 * m]))
    total = time.perf_counter() - t0
    lms = {k[1]: v for k, v in sol.values.items() if isinstance(k, tuple) and k[0] == "l"}
    return SolveResult(
        est, cross, sol.cost_trace, sol.converged, sol.iterations, len(sol.values),
        {"total": total, "linearize": sol.timing.get("linearize", []), "solve": sol.timing.get("solve", [])},
        sol.message, lms or None,
    )


def write_solution(out: Path, res: SolveResult, cfg: RunConfig, reduced: bool) -> None:
    n = 2 * cfg.m
    header = ["t", "flag"] + [f"x_{i}" for i in range(n)] + upper_names("P", n) + ["bubbling"]
    rows = [[e.time, e.flag] + list(map(float, state_vector(e.mean))) + upper(e.cov) + [float(e.bubbling)] for e in res.estimates]
    write_csv(out / "estimate.csv", header, rows)
    cheader = ["t_prev", "t_next"] + [f"C_{i}_{j}" for i in range(n) for j in range(n)]
    write_csv(out / "crosscov.csv", cheader, [[a, b] + list(map(float, C.ravel())) for a, b, C in res.cross])
    if res.landmarks:
        write_csv(out / "landmarks_est.csv", ["id", "x", "y"], [[i, float(p[0]), float(p[1])] for i, p in sorted(res.landmarks.items())])
    write_json(
        out / "cost_trace.json",
        {"cost": [float(c) for c in res.cost_trace], "converged": res.converged, "iterations": res.iterations, "message": res.message},
    )
    lin = res.timing.get("linearize", [])
    write_json(
        out / "timing.json",
        {
            "total_s": res.timing["total"],
            "per_iteration_solve_s": list(map(float, res.timing.get("solve", []))),
            "per_iteration_linearize_s": list(map(float, lin)),
            "mode": "reduced" if reduced else "full",
            "n_variables": res.n_variables,
            "n_states": len(res.estimates),
            "converged": res.converged,
        },
    )


def _read_truth_bundle(data: Path):
    tt, tx = read_truth(data / "truth.csv")
    lm = None
    if (data / "landmarks.csv").exists():
        _, rows = read_csv(data / "landmarks.csv")
        lm = {int(r[0]): np.array([float(r[1]), float(r[2])]) for r in rows}
    return (tt, tx, lm) if lm is not None else (tt, tx)


def cmd_solve(cfg: RunConfig, data: Path, out: Path, reduced: bool, plot: bool = False) -> SolveResult:
    records = read_meas(data / "meas.csv")
    if not records:
        raise ValidationError("measurement file has no records")
    if cfg.group is None:
        res = solve_linear(cfg, records, reduced)
    else:
        truth = _read_truth_bundle(data) if cfg.init == "truth" else None
        res = solve_lie(cfg, records, reduced, truth)
    write_solution(out, res, cfg, reduced)
    if plot:
        _plot_solution(out, res, cfg, data)
    return res


def _plot_solution(out: Path, res: SolveResult, cfg: RunConfig, data: Path) -> None:
    from . import plotting

    t = np.array([e.time for e in res.estimates])
    X = np.array([state_vector(e.mean) for e in res.estimates])
    V = np.array([np.diag(e.cov) for e in res.estimates])
    flags = [e.flag for e in res.estimates]
    truth = None
    if (data / "truth.csv").exists():
        truth = read_truth(data / "truth.csv")
    if cfg.group is None:
        plotting.plot_estimate(t, X, V, flags, out / "estimate.png", *(truth or (None, None)), label="position")
    else:
        xy_truth = truth[1][:, :2] if truth is not None else None
        lms = np.array([p for _, p in sorted(res.landmarks.items())]) if res.landmarks else None
        plotting.plot_planar_path(X[:, :2], out / "path.png", xy_truth, lms)
        plotting.plot_estimate(t, X, V, flags, out / "estimate.png", *(truth or (None, None)), label="x [m]")
    plotting.plot_cost(res.cost_trace, out / "cost.png")


# ================================================================= query


def read_solution(path: Path, cfg: RunConfig):
    header, rows = read_csv(path / "estimate.csv")
    n = 2 * cfg.m
    if len(header) != 2 + n + n * (n + 1) // 2 + 1:
        raise ValidationError("estimate.csv does not match the configured state dimension")
    est = []
    for r in rows:
        vals = [float(v) for v in r[2:]]
        est.append((float(r[0]), r[1], np.array(vals[:n]), from_upper(vals[n : n + n * (n + 1) // 2], n)))
    _, crows = read_csv(path / "crosscov.csv")
    cross = {}
    for r in crows:
        vals = [float(v) for v in r]
        cross[(vals[0], vals[1])] = np.array(vals[2:]).reshape(n, n)
    return est, cross


def cmd_query(cfg: RunConfig, solution: Path, taus: Sequence[float], out: Path, extrapolate: bool = False):
    est, cross = read_solution(solution, cfg)
    knots_est = [e for e in est if e[1] == "estimated"]
    times = np.array([e[0] for e in knots_est])
    n = 2 * cfg.m
    try:
        cross_list = [cross[(float(a), float(b))] for a, b in zip(times, times[1:])]
    except KeyError:
        raise ValidationError("crosscov.csv does not cover every consecutive pair of estimated states") from None
    rows, per_query = [], []
    if cfg.group is None:
        sol = ChainSolution(times, tuple(range(len(times))), [e[2] for e in knots_est], [e[3] for e in knots_est], cross_list, float("nan"))
        model = wnoa_model(cfg.qc_matrix())
        for tau in taus:
            t0 = time.perf_counter()
            try:
                q = query_solution(sol, model, float(tau), extrapolate)
            except ValueError as err:
                raise ValidationError(str(err)) from None
            per_query.append(time.perf_counter() - t0)
            flag = "extrapolated" if q.extrapolated else ("estimated" if q.snapped else "interpolated")
            rows.append([float(tau), flag] + list(map(float, q.density.mean)) + upper(q.density.cov))
    else:
        group = cfg.group
        Qc = cfg.qc_matrix()
        knots = [LieKnot(("T", i), ("w", i), float(t)) for i, t in enumerate(times)]
        values = {}
        for kn, e in zip(knots, knots_est):
            values[kn.pose_key], values[kn.vel_key] = state_from_vector(e[2], group)
        for tau in taus:
            t0 = time.perf_counter()
            try:
                k, snapped = find_bracket(times, float(tau))
            except ValueError as err:
                hint = " (extrapolation is only available for linear datasets)" if extrapolate else ""
                raise ValidationError(f"{err}{hint}") from None
            if snapped:
                mean, cov = knots_est[k][2], knots_est[k][3]
                flag = "estimated"
            else:
                a, b = knots[k - 1], knots[k]
                pair = np.block([[knots_est[k - 1][3], cross_list[k - 1].T], [cross_list[k - 1], knots_est[k][3]]])
                q = query_lie_pair(values, a, b, Qc, float(tau), pair)
                mean = np.concatenate([pose_to_vector(q.pose), q.vel])
                cov = q.cov
                flag = "interpolated"
            per_query.append(time.perf_counter() - t0)
            rows.append([float(tau), flag] + list(map(float, mean)) + upper(cov))
    header = ["t", "flag"] + [f"x_{i}" for i in range(n)] + upper_names("P", n)
    write_csv(out, header, rows)
    write_json(
        out.with_name(out.stem + "_timing.json"),
        {"per_query_s": per_query, "mean_query_s": float(np.mean(per_query)) if per_query else 0.0, "n_queries": len(per_query)},
    )
    return rows


# ================================================================= metrics


def cmd_metrics(cfg: RunConfig, estimate: Path, truth: Path, out: Path, states: str = "all", plot: bool = False) -> dict:
    header, rows = read_csv(estimate)
    n = 2 * cfg.m
    if len(header) < 2 + n + n * (n + 1) // 2:
        raise ValidationError("estimate file does not match the configured state dimension")
    if states == "estimated":
        rows = [r for r in rows if r[1] == "estimated"]
    tt, tx = read_truth(truth)
    if tx.shape[1] != n:
        raise ValidationError("truth file does not match the configured state dimension")
    est_t = np.array([float(r[0]) for r in rows])
    idx = []
    for t in est_t:
        i = int(np.argmin(np.abs(tt - t)))
        if abs(tt[i] - t) > 1e-9:
            raise ValidationError(f"estimate at t={t!r} has no aligned truth row")
        idx.append(i)
    group = cfg.group
    estimates, covs, truths = [], [], []
    for r, i in zip(rows, idx):
        vals = [float(v) for v in r[2:]]
        estimates.append(state_from_vector(np.array(vals[:n]), group))
        covs.append(from_upper(vals[n : n + n * (n + 1) // 2], n))
        truths.append(state_from_vector(tx[i], group))
    res = metrics(estimates, covs, truths, est_t, tt[idx], position_dims=cfg.m if group is None else None)
    report = {
        "rmse_translation": res.rmse_translation,
        "rmse_rotation": res.rmse_rotation,
        "mean_nees": res.mean_nees,
        "nees": [float(v) for v in res.nees],
        "state_dim": n,
        "count": len(rows),
    }
    write_json(out, report)
    if plot:
        from . import plotting

        plotting.plot_nees(est_t, res.nees, n, out.with_suffix(".png"))
    return report


# ================================================================= entry


def _parse_times(text: Optional[str], file: Optional[str]) -> list:
    vals: list = []
    if text:
        try:
            vals += [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise ValidationError("--times must be a comma-separated list of numbers") from None
    if file:
        with open(file) as fh:
            try:
                vals += [float(line) for line in fh if line.strip()]
            except ValueError:
                raise ValidationError(f"{file} must hold one number per line") from None
    if not vals:
        raise ValidationError("no query times given")
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError("query times must be finite")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpct", description="Continuous-time GP trajectory estimation on factor graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="FIELD=JSON", help="override one config field")
        sp.add_argument("--qc", type=float, nargs="+", help="diagonal of the WNOA power spectral density")

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--dataset", choices=DATASETS)
    s.add_argument("--duration", type=float)
    s.add_argument("--rate", type=float)
    s.add_argument("--out", required=True, help="output directory")

    for name, help_ in (("solve", "full batch solve"), ("reduce", "solve on border states, then interpolate the rest")):
        s = sub.add_parser(name, help=help_)
        common(s)
        s.add_argument("--data", required=True, help="directory with meas.csv (and truth.csv)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--dataset", choices=DATASETS)
        s.add_argument("--interp-interval", type=int)
        s.add_argument("--noise-mode", choices=("full", "simplified"))
        s.add_argument("--max-iterations", type=int)
        s.add_argument("--plot", action="store_true", help="also write PNG figures")

    s = sub.add_parser("query", help="query a solution at arbitrary times")
    common(s)
    s.add_argument("--solution", required=True, help="directory with estimate.csv and crosscov.csv")
    s.add_argument("--dataset", choices=DATASETS)
    s.add_argument("--times", help="comma-separated query times")
    s.add_argument("--times-file", help="file with one query time per line")
    s.add_argument("--extrapolate", action="store_true", help="allow times outside the solved span")
    s.add_argument("--out", required=True, help="output CSV")

    s = sub.add_parser("metrics", help="RMSE and NEES of an estimate against truth")
    common(s)
    s.add_argument("--estimate", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--dataset", choices=DATASETS)
    s.add_argument("--states", choices=("all", "estimated"), default="all")
    s.add_argument("--out", required=True, help="output JSON")
    s.add_argument("--plot", action="store_true")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects FIELD=JSON, got {item!r}")
        try:
            out[key.strip()] = json.loads(val)
        except json.JSONDecodeError:
            out[key.strip()] = val
    for attr, key in (
        ("seed", "seed"), ("dataset", "dataset"), ("duration", "duration"), ("rate", "rate"), ("qc", "qc"),
        ("interp_interval", "interp_interval"), ("noise_mode", "noise_mode"), ("max_iterations", "max_iterations"),
    ):
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "simulate":
            info = cmd_simulate(cfg, Path(args.out))
            print(f"simulate: dataset={cfg.dataset} seed={cfg.seed} states={info['states']} measurements={info['measurements']} -> {args.out}")
        elif args.command in ("solve", "reduce"):
            res = cmd_solve(cfg, Path(args.data), Path(args.out), args.command == "reduce", args.plot)
            status = "converged" if res.converged else f"NOT converged ({res.message})"
            print(f"{args.command}: {len(res.estimates)} states, {res.n_variables} variables, cost {res.cost_trace[-1]:.6g}, {status}")
            if not res.converged:
                return EXIT_NUMERICAL
        elif args.command == "query":
            rows = cmd_query(cfg, Path(args.solution), _parse_times(args.times, args.times_file), Path(args.out), args.extrapolate)
            print(f"query: {len(rows)} times -> {args.out}")
        elif args.command == "metrics":
            rep = cmd_metrics(cfg, Path(args.estimate), Path(args.truth), Path(args.out), args.states, args.plot)
            print(f"metrics: rmse_translation={rep['rmse_translation']:.6g} mean_nees={rep['mean_nees']:.6g}")
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, csv.Error) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (np.linalg.LinAlgError, NumericalFailure, FloatingPointError, SingularInformationError, InjectivityError, DegenerateGeometryError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
