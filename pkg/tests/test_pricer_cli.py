"""Command-line tool, single-price dispatch and the benchmark report."""
from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgamerican import correction_learn as cl
from vgamerican.mc_lsm import mc_american_put
from vgamerican.pricer_cli import (DEFAULT_DATASET, DEFAULT_MODEL, METHODS, TABLES, BenchReport,
                                   BenchRow, main, price_with, run_bench)

T2_LAST = (0.05, 0.01, 1.0 / 12.0, 0.4, 0.1, -0.1)


def _price_args(theta, spot, strike, *extra):
    names = ("r", "q", "T", "sigma", "nu", "theta")
    args = ["price"]
    for n, v in zip(names, theta):
        args += [f"--{n}", repr(v)]
    return args + ["--spot", repr(spot), "--strike", repr(strike), *extra]


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out.strip(), err


# ---------------------------------------------------------------------------
# price sub-command


def test_euro_put_at_zero_strike_prints_zero(capsys):
    code, out, _ = _run(capsys, _price_args(T2_LAST, 2900.0, 0.0, "--method", "euro"))
    assert code == 0
    assert out == "0.0000"


def test_fd_fine_reproduces_table_value(capsys):
    code, out, _ = _run(capsys, _price_args(T2_LAST, 2900.0, 3000.0, "--method", "fd_fine"))
    assert code == 0
    assert out.count(".") == 1 and len(out.split(".")[1]) == 4
    assert float(out) == pytest.approx(170.431, abs=0.5)


def test_main_reproduces_table_value(capsys, main_pricer):
    code, out, err = _run(capsys, _price_args(T2_LAST, 2900.0, 3000.0))
    assert code == 0
    assert float(out) == pytest.approx(170.459, abs=1.0)
    assert "lambda=" in err and "x_star=" in err and "loss=" in err


def test_main_table1_row(main_pricer):
    theta = (0.05, 0.05, 0.5, 0.1, 0.6, -0.5)
    assert main_pricer.price(theta, 2900.0, 2800.0).price == pytest.approx(218.195, abs=1.0)


def test_main_needs_a_model_file(capsys, tmp_path):
    code, _, err = _run(capsys, _price_args(T2_LAST, 2900.0, 3000.0,
                                            "--model", str(tmp_path / "missing.json")))
    assert code == 2
    assert "missing.json" in err


def test_invalid_parameters_exit_2(capsys):
    bad = (0.05, 0.01, 1.0 / 12.0, -0.4, 0.1, -0.1)
    code, _, err = _run(capsys, _price_args(bad, 2900.0, 3000.0, "--method", "fd_fine"))
    assert code == 2
    assert "invalid input" in err


def test_numerical_failure_exits_1(capsys):
    # the FFT damping moment E[S^2.5] does not exist for this right-skewed set
    theta = (0.05, 0.01, 0.5, 0.4, 0.6, 0.5)
    code, _, err = _run(capsys, _price_args(theta, 2900.0, 3000.0, "--method", "euro"))
    assert code == 1
    assert "DampingError" in err


def test_missing_flag_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["price", "--r", "0.05"])
    assert exc.value.code == 2


def test_unknown_method_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(_price_args(T2_LAST, 2900.0, 3000.0, "--method", "tree"))
    assert exc.value.code == 2


@pytest.mark.parametrize("method", [m for m in METHODS if m not in ("main", "mc")])
def test_every_engine_is_at_least_european(method):
    theta = (0.05, 0.01, 0.25, 0.2, 0.3, -0.3)
    euro = price_with("euro", theta, 2900.0, 3000.0)
    assert price_with(method, theta, 2900.0, 3000.0) >= euro - 1e-9


# ---------------------------------------------------------------------------
# Monte Carlo determinism


def test_mc_is_deterministic_given_seed(short_env):
    p = cl.split_theta(T2_LAST)[1]
    a = mc_american_put(2900.0, 3000.0, short_env, p, n_steps=50, n_paths=4000, seed=9)
    b = mc_american_put(2900.0, 3000.0, short_env, p, n_steps=50, n_paths=4000, seed=9)
    c = mc_american_put(2900.0, 3000.0, short_env, p, n_steps=50, n_paths=4000, seed=10)
    assert a.price == b.price and a.stderr == b.stderr
    assert a.price != c.price


@pytest.mark.slow
def test_bench_mc_column_repeats_with_same_seed():
    rows = TABLES[2][:1]
    one, _ = run_bench(rows, ["mc"], seed=3, reps=1)
    two, _ = run_bench(rows, ["mc"], seed=3, reps=1)
    assert one.prices["mc"] == two.prices["mc"]


# ---------------------------------------------------------------------------
# benchmark report


@pytest.fixture(scope="module")
def small_report():
    rows = TABLES[2][:3]
    report, failures = run_bench(rows, ["fd_coarse", "simple", "euro"], reps=2)
    assert not failures
    return report


def test_bench_always_includes_reference(small_report):
    assert small_report.methods[0] == "fd_fine"
    assert small_report.rmse["fd_fine"] == 0.0 and small_report.mae["fd_fine"] == 0.0


def test_bench_rmse_below_mae(small_report):
    for m in small_report.methods:
        assert small_report.rmse[m] <= small_report.mae[m] + 1e-12


def test_bench_report_round_trip(small_report):
    assert BenchReport.parse(small_report.emit()) == small_report
    text = small_report.to_text()
    assert "RMSE" in text and "CPU" in text


def test_table_presets_follow_the_published_layout():
    assert [len(TABLES[t]) for t in (1, 2, 3, 4)] == [12, 12, 12, 12]
    assert {row.theta[2] for row in TABLES[1]} == {0.5}
    assert {row.theta[2] for row in TABLES[2]} == {1.0 / 12.0}
    assert {row.theta[2] for row in TABLES[4]} == {1.0}
    assert all(row.s0 == 2900.0 for t in TABLES for row in TABLES[t])
    assert sorted({row.k for row in TABLES[4]}) == [2700.0, 2900.0, 3100.0]


_inputs = st.floats(allow_nan=False, allow_infinity=False)
_prices = st.floats(allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.tuples(*[_inputs] * 6), _inputs, _inputs, _prices, _prices),
                min_size=1, max_size=5))
def test_report_round_trip_property(cells):
    rows = [BenchRow(tuple(c[0]), c[1], c[2]) for c in cells]
    prices = {"fd_fine": [c[3] for c in cells], "main": [c[4] for c in cells]}
    report = BenchReport(rows, ["fd_fine", "main"], prices)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report.summarize()
    report.cpu_seconds = {"fd_fine": 0.1, "main": math.nan}
    report.cpu_median = {"fd_fine": 0.1, "main": 1e-3}
    assert BenchReport.parse(report.emit()) == report


def test_bench_cli_writes_report(capsys, tmp_path):
    out = tmp_path / "t2.csv"
    code = main(["bench", "--table", "2", "--methods", "euro", "--reps", "1", "--out", str(out)])
    text, _ = capsys.readouterr()
    assert code == 0
    report = BenchReport.parse(out.read_text())
    assert report.methods == ["fd_fine", "euro"] and len(report.rows) == 12
    assert "RMSE" in text


def test_bench_cli_rejects_unknown_method(capsys):
    assert main(["bench", "--table", "2", "--methods", "euro,tree"]) == 2


# ---------------------------------------------------------------------------
# precalc and fit sub-commands


def test_precalc_rerun_is_a_noop(capsys, tmp_path):
    grid = tmp_path / "grid.csv"
    grid.write_text("0.05,0.01,0.5,0.2,0.3,-0.3\n0.1,0.01,0.1,0.1,0.1,-0.5\n")
    out = tmp_path / "d.csv"
    assert main(["precalc", "--grid-file", str(grid), "--out", str(out)]) == 0
    first = out.read_bytes()
    capsys.readouterr()
    assert main(["precalc", "--grid-file", str(grid), "--out", str(out)]) == 0
    _, err = capsys.readouterr()
    assert "written 0, already present 2" in err
    assert out.read_bytes() == first


def test_fit_cli_writes_a_loadable_model(capsys, tmp_path, desk_bundle):
    _, path, _ = desk_bundle
    out = tmp_path / "m.json"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", cl.DegenerateFitWarning)
        assert main(["fit", "--dataset", str(path), "--out", str(out)]) == 0
    bundle = cl.load_bundle(out, path)
    assert set(bundle.models) == set(cl.RESPONSES)


def test_shipped_model_matches_shipped_dataset(main_pricer):
    assert main_pricer.bundle.checksum == cl.dataset_checksum(DEFAULT_DATASET)
    assert DEFAULT_MODEL.exists()


# ---------------------------------------------------------------------------
# r -> 0


def test_main_price_is_continuous_as_r_vanishes(main_pricer):
    base = (0.0, 0.01, 0.25, 0.2, 0.3, -0.3)
    prices = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", cl.HullWarning)
        for r in (0.0, 1e-8, 1e-6, 1e-4):
            prices.append(main_pricer.price((r,) + base[1:], 2900.0, 2900.0).price)
    assert np.all(np.isfinite(prices))
    assert np.max(np.abs(np.diff(prices))) < 0.05
