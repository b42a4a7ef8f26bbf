"""PNG figures for CLI reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_estimate(
    times: np.ndarray,
    means: np.ndarray,
    variances: np.ndarray,
    flags: Sequence[str],
    path,
    truth_times: Optional[np.ndarray] = None,
    truth: Optional[np.ndarray] = None,
    component: int = 0,
    label: str = "state",
):
    """One state component over time with a 3-sigma band; interpolated states drawn hollow."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    sd = np.sqrt(np.maximum(variances[:, component], 0.0))
    mu = means[:, component]
    ax.fill_between(times, mu - 3 * sd, mu + 3 * sd, color="tab:blue", alpha=0.2, lw=0, label="3 sigma")
    ax.plot(times, mu, color="tab:blue", lw=1.2, label="estimate")
    if truth is not None:
        ax.plot(truth_times, truth[:, component], color="tab:green", lw=1.0, ls="--", label="truth")
    est = np.array([f == "estimated" for f in flags])
    ax.plot(times[est], mu[est], "o", ms=3, color="tab:blue")
    ax.plot(times[~est], mu[~est], "o", ms=3, mfc="none", color="tab:blue", alpha=0.5)
    ax.set_xlabel("t [s]")
    ax.set_ylabel(label)
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_planar_path(xy_est: np.ndarray, path, xy_truth: Optional[np.ndarray] = None, landmarks=None):
    fig, ax = plt.subplots(figsize=(5, 5))
    if xy_truth is not None:
        ax.plot(xy_truth[:, 0], xy_truth[:, 1], "--", color="tab:green", lw=1.0, label="truth")
    ax.plot(xy_est[:, 0], xy_est[:, 1], color="tab:blue", lw=1.2, label="estimate")
    if landmarks is not None and len(landmarks):
        ax.plot(landmarks[:, 0], landmarks[:, 1], "k^", ms=5, label="landmarks")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_cost(trace: Sequence[float], path):
    fig, ax = plt.subplots(figsize=(5, 3))
    trace = np.maximum(np.asarray(trace, dtype=float), np.finfo(float).tiny)
    ax.semilogy(np.arange(len(trace)), trace, "o-", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("cost")
    return _save(fig, path)


def plot_nees(times: np.ndarray, nees: np.ndarray, dim: int, path):
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(times, nees, lw=1.0, label="NEES")
    ax.axhline(dim, color="k", ls=":", lw=1.0, label=f"d = {dim}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("NEES")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)
