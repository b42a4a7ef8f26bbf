import json

import numpy as np
import pytest

from gpct.cli import (
    EXIT_IO,
    EXIT_OK,
    EXIT_VALIDATION,
    RunConfig,
    ValidationError,
    from_upper,
    main,
    read_csv,
    read_meas,
    read_truth,
    upper,
    write_meas,
)
from gpct.datasets import gen_se2_landmarks


def run(*args):
    return main([str(a) for a in args])


def table(path):
    header, rows = read_csv(path)
    return header, np.array([[float(v) for v in r[:1] + r[2:]] for r in rows]), [r[1] for r in rows]


@pytest.fixture(scope="module")
def sinusoid(tmp_path_factory):
    d = tmp_path_factory.mktemp("sin")
    assert run("simulate", "--seed", 4, "--duration", 6, "--out", d) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def arc(tmp_path_factory):
    d = tmp_path_factory.mktemp("arc")
    assert run("simulate", "--seed", 1, "--dataset", "se2_arc", "--set", "n_knots=30", "--out", d) == EXIT_OK
    return d


def test_simulate_is_deterministic(tmp_path, sinusoid):
    assert run("simulate", "--seed", 4, "--duration", 6, "--out", tmp_path) == EXIT_OK
    for name in ("truth.csv", "meas.csv"):
        assert (tmp_path / name).read_bytes() == (sinusoid / name).read_bytes()
    t, x = read_truth(sinusoid / "truth.csv")
    assert len(t) == 61 and np.allclose(x[:, 0], np.sin(t))


def test_simulate_requires_seed(tmp_path, capsys):
    with pytest.raises(SystemExit):
        run("simulate", "--out", tmp_path)


@pytest.mark.parametrize(
    "extra",
    [
        ["--duration", "0"],
        ["--set", "bogus=1"],
        ["--set", "noise_mode=\"approx\""],
        ["--qc", "1", "2"],
        ["--seed", "-3"],
    ],
)
def test_invalid_config_exit_code(tmp_path, extra):
    args = ["simulate", "--seed", "1", "--out", tmp_path] + extra
    assert run(*args) == EXIT_VALIDATION


def test_unknown_field_in_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": "sinusoid", "knots": 5}))
    with pytest.raises(ValidationError, match="knots"):
        RunConfig.from_dict(json.loads(cfg.read_text()))
    assert run("simulate", "--seed", 1, "--config", cfg, "--out", tmp_path) == EXIT_VALIDATION


def test_missing_input_is_io_error(tmp_path):
    assert run("solve", "--data", tmp_path / "nope", "--out", tmp_path) == EXIT_IO


def test_full_and_reduced_linear_agree(tmp_path):
    # measurements every 0.5 s land on the borders, so the reduction is exact
    data, full, red = tmp_path / "d", tmp_path / "f", tmp_path / "r"
    for d in (data, full, red):
        d.mkdir()
    sparse = ["--set", "meas_interval=0.5", "--set", "knot_rate=10"]
    assert run("simulate", "--seed", 4, "--duration", 6, "--out", data, *sparse) == EXIT_OK
    assert run("solve", "--data", data, "--out", full, *sparse) == EXIT_OK
    assert run("reduce", "--data", data, "--out", red, "--interp-interval", 5, *sparse) == EXIT_OK
    h1, a, f1 = table(full / "estimate.csv")
    h2, b, f2 = table(red / "estimate.csv")
    assert h1 == h2
    # the trailing bubbling column is only meaningful in reduced runs
    assert np.allclose(a[:, :-1], b[:, :-1], rtol=0, atol=1e-9)
    assert set(f1) == {"estimated"} and f2.count("estimated") == 13
    timing = json.loads((red / "timing.json").read_text())
    assert timing["n_variables"] == 13 and timing["mode"] == "reduced"
    assert json.loads((full / "timing.json").read_text())["n_variables"] == 61


def test_query_at_knot_reproduces_solve_row(tmp_path, sinusoid):
    sol = tmp_path / "s"
    sol.mkdir()
    run("solve", "--data", sinusoid, "--out", sol)
    _, est, _ = table(sol / "estimate.csv")
    out = tmp_path / "q.csv"
    assert run("query", "--solution", sol, "--times", "1.0,1.05", "--out", out) == EXIT_OK
    _, q, flags = table(out)
    assert flags == ["estimated", "interpolated"]
    row = est[np.argmin(np.abs(est[:, 0] - 1.0))]
    assert np.array_equal(q[0], row[:-1])
    assert est[10, 1] < q[1, 1] < est[11, 1] or est[11, 1] < q[1, 1] < est[10, 1]
    assert json.loads((tmp_path / "q_timing.json").read_text())["n_queries"] == 2


def test_query_out_of_span(tmp_path, sinusoid):
    sol = tmp_path / "s"
    sol.mkdir()
    run("solve", "--data", sinusoid, "--out", sol)
    out = tmp_path / "q.csv"
    assert run("query", "--solution", sol, "--times", "7.5", "--out", out) == EXIT_VALIDATION
    assert run("query", "--solution", sol, "--times", "7.5", "--extrapolate", "--out", out) == EXIT_OK
    _, q, flags = table(out)
    assert flags == ["extrapolated"]


def test_lie_solve_query_and_metrics(tmp_path, arc):
    sol = tmp_path / "s"
    sol.mkdir()
    assert run("reduce", "--dataset", "se2_arc", "--data", arc, "--out", sol, "--interp-interval", 5, "--plot") == EXIT_OK
    for png in ("estimate.png", "path.png", "cost.png"):
        assert (sol / png).stat().st_size > 0
    out = tmp_path / "q.csv"
    assert run("query", "--dataset", "se2_arc", "--solution", sol, "--times", "0.5,0.77", "--out", out) == EXIT_OK
    assert run("query", "--dataset", "se2_arc", "--solution", sol, "--times", "9", "--extrapolate", "--out", out) == EXIT_VALIDATION
    rep_path = tmp_path / "m.json"
    assert run("metrics", "--dataset", "se2_arc", "--estimate", sol / "estimate.csv", "--truth", arc / "truth.csv",
               "--out", rep_path, "--plot") == EXIT_OK
    rep = json.loads(rep_path.read_text())
    assert set(rep) == {"rmse_translation", "rmse_rotation", "mean_nees", "nees", "state_dim", "count"}
    assert rep["count"] == 30 and rep["state_dim"] == 6 and len(rep["nees"]) == 30
    assert rep["rmse_translation"] < 0.1
    assert rep_path.with_suffix(".png").exists()


def test_metrics_rejects_misaligned_truth(tmp_path, sinusoid):
    sol = tmp_path / "s"
    sol.mkdir()
    run("solve", "--data", sinusoid, "--out", sol)
    text = (sinusoid / "truth.csv").read_text().splitlines()
    row = text[3].split(",")
    row[0] = "0.2000001"
    text[3] = ",".join(row)
    bad = tmp_path / "truth.csv"
    bad.write_text("\n".join(text) + "\n")
    assert run("metrics", "--estimate", sol / "estimate.csv", "--truth", bad, "--out", tmp_path / "m.json") == EXIT_VALIDATION


def test_measurement_csv_round_trip(tmp_path):
    traj, log = gen_se2_landmarks(n_knots=10, seed=2)
    write_meas(tmp_path, log)
    back = read_meas(tmp_path / "meas.csv")
    assert len(back) == len(log)
    for a, b in zip(log, back):
        assert a.time == b.time and a.sensor == b.sensor and a.target == b.target
        assert np.array_equal(a.value, b.value)


def test_upper_triangle_round_trip(rng):
    A = rng.normal(size=(4, 4))
    P = A @ A.T
    assert np.array_equal(from_upper(upper(P), 4), P)
