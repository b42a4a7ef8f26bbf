import numpy as np
import pytest


def random_spd(rng: np.random.Generator, n: int, cond: float = 10.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), size=n))
    return (q * eig) @ q.T


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def chain_problem(rng: np.random.Generator, K: int, m: int = 1, meas_prob: float = 0.7):
    """Random WNOA chain: K+1 knots at random times, position measurements at a random subset."""
    from gpct.chain import Knot, MeasurementFactor
    from gpct.gaussian import GaussianDensity
    from gpct.lti import wnoa_model

    model = wnoa_model(np.diag(rng.uniform(0.2, 2.0, size=m)))
    times = np.cumsum(np.r_[rng.uniform(0.0, 1.0), rng.uniform(0.1, 1.5, size=K)])
    knots = [Knot(i, float(t), 2 * m) for i, t in enumerate(times)]
    prior = GaussianDensity(rng.normal(size=2 * m), random_spd(rng, 2 * m))
    C = np.hstack([np.eye(m), np.zeros((m, m))])
    meas = [
        MeasurementFactor(C, random_spd(rng, m) * 0.1, rng.normal(size=m), time=float(t))
        for t in times
        if rng.uniform() < meas_prob
    ]
    return model, knots, prior, meas


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
