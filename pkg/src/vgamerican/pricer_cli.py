"""Pricing front end and command-line tool.

``price_with`` dispatches a single American (or European) put query to one
of the engines; ``MainPricer`` is the learned-correction method.  The
``vgamerican`` command exposes four sub-commands:

``precalc``  build the pre-calculation dataset,
``fit``      fit the kernel bandwidths and write the model file,
``price``    price one option,
``bench``    reproduce one of the four benchmark tables.

Exit codes: 0 on success, 1 on a numerical failure, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import statistics
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import correction_learn as cl
from . import pide_fd
from .bms_approx import simple_vg_american
from .errors import InvalidParams, NoExerciseRegion, PricingError
from .euro_fft import build_curve, euro_put
from .mc_lsm import mc_american_put
from .quad_core import N_DEFAULT, CorrectionVector, OideProblem

log = logging.getLogger(__name__)

METHODS = ("main", "fd_fine", "fd_coarse", "mc", "simple", "euro")
DATA_DIR = Path(__file__).with_name("data")
DEFAULT_DATASET = DATA_DIR / "full_grid.csv"
DEFAULT_MODEL = DATA_DIR / "full_grid_model.json"


# ---------------------------------------------------------------------------
# main method
# ---------------------------------------------------------------------------


@dataclass
class MainResult:
    price: float
    lam: float
    x_star: float
    loss: float
    evaluations: int


class MainPricer:
    """Learned correction targets plus the OIDE collocation solve.

    Every call builds its own European curve so that timings include the
    full pricing routine.
    """

    def __init__(self, bundle: cl.ModelBundle, n: int = N_DEFAULT, method: str = "profile"):
        self.bundle = bundle
        self.n = n
        self.method = method

    @classmethod
    def from_files(cls, model_path=DEFAULT_MODEL, dataset_path=DEFAULT_DATASET, **kw) -> MainPricer:
        return cls(cl.load_bundle(model_path, dataset_path), **kw)

    def price(self, theta: Sequence[float], s0: float, k: float) -> MainResult:
        env, p = cl.split_theta(theta)
        if k == 0.0:
            return MainResult(0.0, math.nan, -math.inf, 0.0, 0)
        self.bundle.hull_check(theta)
        vals = self.bundle.predict_all(theta)
        problem = OideProblem(k, env, p, curve=build_curve(env, p), n=self.n)
        targets = CorrectionVector(vals[: self.n + 1] * (k / self.bundle.k0), float(k), self.n)
        init = cl.init_from_predictions(vals, k, self.bundle.k0, problem)
        try:
            fit, loss_val, nev = problem.solve_fit(targets, init, method=self.method)
        except NoExerciseRegion:
            # no exercise boundary in the search box (r -> 0 and the like):
            # the premium is negligible and the European price is returned
            euro = float(euro_put(s0, k, env, p, problem.curve))
            return MainResult(max(euro, k - s0), math.nan, -math.inf, 0.0, 0)
        return MainResult(problem.price(s0, fit), fit.lam, fit.x_star, loss_val, nev)


def price_with(method: str, theta: Sequence[float], s0: float, k: float, *,
               pricer: MainPricer | None = None, seed: int | None = 0) -> float:
    """Price one put with the named engine."""
    env, p = cl.split_theta(theta)
    if method == "euro":
        return float(euro_put(s0, k, env, p, build_curve(env, p)))
    if k == 0.0:
        return 0.0
    if method == "main":
        if pricer is None:
            raise ValueError("the main method needs a fitted model")
        return pricer.price(theta, s0, k).price
    if method in ("fd_fine", "fd_coarse"):
        dims = pide_fd.FD_FINE if method == "fd_fine" else pide_fd.FD_COARSE
        grid = pide_fd.make_grid(env, p, k, *dims)
        return pide_fd.solve(env, p, k, grid=grid).price_at(s0)
    if method == "mc":
        return mc_american_put(s0, k, env, p, seed=seed).price
    if method == "simple":
        return simple_vg_american(s0, k, env, p, curve=build_curve(env, p))
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# benchmark tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    theta: tuple[float, ...]
    s0: float
    k: float


_SWEEP = ((0.1, 0.1, -0.5), (0.4, 0.6, -0.5), (0.1, 0.6, -0.1), (0.4, 0.1, -0.1))


def _vg_sweep(T: float, strikes: Sequence[float]) -> list[BenchRow]:
    return [BenchRow((0.05, 0.01, T, s, n, th), 2900.0, float(k))
            for k in strikes for (s, n, th) in _SWEEP]


#: Table presets: 1 is an r/q/K sweep, 2-4 sweep the VG parameters and K.
TABLES: dict[int, list[BenchRow]] = {
    1: [BenchRow((r, q, 0.5, 0.1, 0.6, -0.5), 2900.0, float(k))
        for (r, q) in ((0.10, 0.01), (0.05, 0.05), (0.01, 0.10))
        for k in (2600, 2800, 3000, 3200)],
    2: _vg_sweep(1.0 / 12.0, (2800, 2900, 3000)),
    3: _vg_sweep(0.25, (2800, 2900, 3000)),
    4: _vg_sweep(1.0, (2700, 2900, 3100)),
}


@dataclass
class BenchReport:
    """Prices per row and method, with error and timing summaries.

    ``rmse`` and ``mae`` (maximum absolute error) are measured against the
    ``reference`` column; ``cpu_seconds`` is the mean and ``cpu_median``
    the median wall time per price.
    """

    rows: list[BenchRow]
    methods: list[str]
    prices: dict[str, list[float]]
    reference: str = "fd_fine"
    rmse: dict[str, float] = field(default_factory=dict)
    mae: dict[str, float] = field(default_factory=dict)
    cpu_seconds: dict[str, float] = field(default_factory=dict)
    cpu_median: dict[str, float] = field(default_factory=dict)

    def summarize(self) -> None:
        ref = np.asarray(self.prices[self.reference])
        for m in self.methods:
            err = np.asarray(self.prices[m]) - ref
            ok = np.isfinite(err)
            self.rmse[m] = float(np.sqrt(np.mean(err[ok] ** 2))) if ok.any() else math.nan
            self.mae[m] = float(np.max(np.abs(err[ok]))) if ok.any() else math.nan

    def to_text(self) -> str:
        head = ["r", "q", "T", "sigma", "nu", "theta", "S", "K"] + self.methods
        lines = ["  ".join(f"{h:>9}" for h in head)]
        for i, row in enumerate(self.rows):
            cells = [f"{v:9.4g}" for v in (*row.theta, row.s0, row.k)]
            cells += [f"{self.prices[m][i]:9.3f}" for m in self.methods]
            lines.append("  ".join(cells))
        pad = "  ".join([" " * 9] * 7)
        for label, table in (("RMSE", self.rmse), ("MAE", self.mae), ("CPU", self.cpu_seconds),
                             ("CPU med", self.cpu_median)):
            fmt = "{:9.3f}" if label in ("RMSE", "MAE") else "{:9.2e}"
            lines.append(f"{pad}  {label:>9}  " + "  ".join(fmt.format(table[m]) for m in self.methods))
        return "\n".join(lines)

    def emit(self) -> str:
        """Comma-delimited report, floats written with ``repr`` precision."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "r", "q", "T", "sigma", "nu", "theta", "S", "K", *self.methods])
        w.writerow(["reference", self.reference] + [""] * (7 + len(self.methods)))
        for i, row in enumerate(self.rows):
            w.writerow(["row", *map(repr, row.theta), repr(row.s0), repr(row.k),
                        *(repr(float(self.prices[m][i])) for m in self.methods)])
        for label, table in (("rmse", self.rmse), ("mae", self.mae),
                             ("cpu_mean", self.cpu_seconds), ("cpu_median", self.cpu_median)):
            w.writerow([label] + [""] * 8 + [repr(float(table[m])) for m in self.methods])
        return buf.getvalue()

    @classmethod
    def parse(cls, text: str) -> BenchReport:
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        methods = header[9:]
        reference = next(reader)[1]
        rows: list[BenchRow] = []
        prices: dict[str, list[float]] = {m: [] for m in methods}
        summaries: dict[str, dict[str, float]] = {}
        for rec in reader:
            if rec[0] == "row":
                vals = list(map(float, rec[1:9]))
                rows.append(BenchRow(tuple(vals[:6]), vals[6], vals[7]))
                for m, v in zip(methods, rec[9:]):
                    prices[m].append(float(v))
            else:
                summaries[rec[0]] = {m: float(v) for m, v in zip(methods, rec[9:])}
        return cls(rows, methods, prices, reference, summaries.get("rmse", {}),
                   summaries.get("mae", {}), summaries.get("cpu_mean", {}),
                   summaries.get("cpu_median", {}))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BenchReport):
            return NotImplemented

        def same(a, b):
            return a.keys() == b.keys() and all(
                (math.isnan(a[m]) and math.isnan(b[m])) or a[m] == b[m] for m in a)

        return (self.rows == other.rows and self.methods == other.methods
                and self.reference == other.reference
                and all(np.array_equal(self.prices[m], other.prices[m], equal_nan=True)
                        for m in self.methods)
                and same(self.rmse, other.rmse) and same(self.mae, other.mae)
                and same(self.cpu_seconds, other.cpu_seconds)
                and same(self.cpu_median, other.cpu_median))


def _timed(fn, reps: int, budget: float) -> tuple[float, list[float]]:
    """Run ``fn`` at least once and up to ``reps`` times within ``budget`` seconds."""
    times: list[float] = []
    value = math.nan
    spent = 0.0
    while len(times) < reps and (len(times) < 1 or spent < budget):
        t0 = time.perf_counter()
        value = fn()
        dt = time.perf_counter() - t0
        times.append(dt)
        spent += dt
    return value, times


def run_bench(rows: Sequence[BenchRow], methods: Sequence[str], *, pricer: MainPricer | None = None,
              seed: int | None = 0, reps: int = 20, budget: float = 5.0,
              progress=None) -> tuple[BenchReport, list[str]]:
    """Price every row with every method; the first-listed reference is ``fd_fine``.

    Each (row, method) cell is repeated up to ``reps`` times, stopping early
    once ``budget`` seconds have been spent on that cell (slow engines such
    as Monte Carlo then run once or a few times).  Returns the report and a
    list of failure messages.
    """
    methods = list(methods)
    if "fd_fine" not in methods:
        methods = ["fd_fine"] + methods
    prices = {m: [] for m in methods}
    times = {m: [] for m in methods}
    medians = {m: [] for m in methods}
    failures = []
    for i, row in enumerate(rows):
        for m in methods:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", cl.HullWarning)
                    v, ts = _timed(lambda: price_with(m, row.theta, row.s0, row.k,
                                                      pricer=pricer, seed=seed), reps, budget)
            except (PricingError, ValueError) as exc:
                failures.append(f"row {i} method {m}: {exc}")
                v, ts = math.nan, []
            prices[m].append(float(v))
            times[m].extend(ts)
            if ts:
                medians[m].append(statistics.median(ts))
        if progress:
            progress(i + 1, len(rows))
    report = BenchReport(list(rows), methods, prices)
    report.summarize()
    report.cpu_seconds = {m: float(np.mean(times[m])) if times[m] else math.nan for m in methods}
    report.cpu_median = {m: float(np.mean(medians[m])) if medians[m] else math.nan for m in methods}
    return report, failures


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _grid_from_args(args) -> list[tuple[float, ...]]:
    if args.grid_file:
        rows = np.loadtxt(args.grid_file, delimiter=",", ndmin=2)
        if rows.shape[1] != 6:
            raise SystemExit(2)
        return [tuple(map(float, r)) for r in rows]
    levels = {"full": cl.FULL_GRID_LEVELS, "half": cl.HALF_GRID_LEVELS,
              "desk": cl.DESK_GRID_LEVELS}[args.grid]
    return cl.grid_points(levels)


def cmd_precalc(args) -> int:
    grid = _grid_from_args(args)
    out = Path(args.out)

    def progress(done, total):
        if done % 50 == 0 or done == total:
            print(f"{done}/{total} records", file=sys.stderr)

    report = cl.build_dataset(grid, out, workers=args.workers, progress=progress)
    print(f"written {report.written}, already present {report.skipped}, failed {len(report.failed)}",
          file=sys.stderr)
    for theta, cause in report.failed:
        print(f"failed: {theta}: {cause}", file=sys.stderr)
    return 1 if report.failed else 0


def cmd_fit(args) -> int:
    records = cl.read_dataset(args.dataset)
    bundle = cl.fit_bundle(records, seed=args.seed, score=args.score,
                           checksum=cl.dataset_checksum(args.dataset))
    cl.save_bundle(bundle, args.out)
    for r, m in bundle.models.items():
        print(f"{r}: " + " ".join(f"{a:.4g}" for a in m.bandwidths), file=sys.stderr)
    return 0


def _load_pricer(args) -> MainPricer:
    return MainPricer.from_files(args.model, args.dataset)


def cmd_price(args) -> int:
    theta = (args.r, args.q, args.T, args.sigma, args.nu, args.theta)
    if args.method == "main":
        res = _load_pricer(args).price(theta, args.spot, args.strike)
        print(f"{res.price:.4f}")
        print(f"lambda={res.lam:.6g} x_star={res.x_star:.6g} loss={res.loss:.3e} "
              f"evaluations={res.evaluations}", file=sys.stderr)
    else:
        print(f"{price_with(args.method, theta, args.spot, args.strike, seed=args.seed):.4f}")
    return 0


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        print(f"unknown method(s): {', '.join(bad)}", file=sys.stderr)
        return 2
    pricer = _load_pricer(args) if "main" in methods else None

    def progress(done, total):
        print(f"row {done}/{total}", file=sys.stderr)

    report, failures = run_bench(TABLES[args.table], methods, pricer=pricer, seed=args.seed,
                                 reps=args.reps, progress=progress)
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.emit())
    for f in failures:
        print(f, file=sys.stderr)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vgamerican", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    pc = sub.add_parser("precalc", help="build the pre-calculation dataset")
    pc.add_argument("--grid", choices=("full", "half", "desk"), default="full")
    pc.add_argument("--grid-file", help="comma-separated r,q,T,sigma,nu,theta rows")
    pc.add_argument("--workers", type=int, default=1)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_precalc)

    ft = sub.add_parser("fit", help="fit kernel bandwidths on a dataset")
    ft.add_argument("--dataset", default=str(DEFAULT_DATASET))
    ft.add_argument("--out", default=str(DEFAULT_MODEL))
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--score", choices=("all", "holdout"), default="all")
    ft.set_defaults(func=cmd_fit)

    pr = sub.add_parser("price", help="price one put")
    for name in ("r", "q", "T", "sigma", "nu", "theta", "spot", "strike"):
        pr.add_argument(f"--{name}", type=float, required=True)
    pr.add_argument("--method", choices=METHODS, default="main")
    pr.add_argument("--dataset", default=str(DEFAULT_DATASET))
    pr.add_argument("--model", default=str(DEFAULT_MODEL))
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_price)

    bn = sub.add_parser("bench", help="reproduce a benchmark table")
    bn.add_argument("--table", type=int, choices=sorted(TABLES), required=True)
    bn.add_argument("--methods", default="main,fd_coarse,simple,euro")
    bn.add_argument("--dataset", default=str(DEFAULT_DATASET))
    bn.add_argument("--model", default=str(DEFAULT_MODEL))
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--reps", type=int, default=20)
    bn.add_argument("--out")
    bn.set_defaults(func=cmd_bench)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidParams as exc:
        print(f"{args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except PricingError as exc:
        print(f"{args.command} failed ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
