"""Pre-calculation over a parameter grid and kernel regression of the corrections.

For every grid point ``Theta = (r, q, T, sigma, nu, theta)`` the fine
finite-difference solve gives the exercise boundary and the premium slope at
the reference strike ``K0``; the residual of the premium equation at those
parameters is the correction vector learned here.  Unseen parameter sets get
Nadaraya-Watson estimates with a Gaussian product kernel

    kappa_a(t, t') = exp(-sum_j a_j (t_j - t'_j)^2),

one bandwidth vector per response (each g component, lambda and x*).
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

from . import pide_fd
from .errors import BoundaryInfeasible, PricingError
from .euro_fft import build_curve
from .quad_core import (
    LAMBDA_BOX,
    N_DEFAULT,
    XSTAR_GAP_BOX,
    CorrectionVector,
    OideProblem,
    PremiumFit,
)
from .vg_model import MarketEnv, VgParams

log = logging.getLogger(__name__)

K0 = 1000.0
#: extra log-spot room below the FD grid when the boundary is deeper than it
DEEP_PAD = 1.5
FORMAT_TAG = "vgamerican-precalc/1"
MODEL_TAG = "vgamerican-kernel/1"
THETA_NAMES = ("r", "q", "T", "sigma", "nu", "theta")
RESPONSES = tuple(f"g_{i}" for i in range(N_DEFAULT + 1)) + ("lambda_opt", "x_star_opt")

#: The full pre-calculation grid (4 * 4 * 6 * 4 * 3 * 3 = 3456 points).
FULL_GRID_LEVELS = {
    "r": (0.01, 0.04, 0.07, 0.1),
    "q": (0.01, 0.04, 0.07, 0.1),
    "T": (0.1, 0.3, 0.5, 0.7, 0.9, 1.1),
    "sigma": (0.1, 0.2, 0.3, 0.4),
    "nu": (0.1, 0.3, 0.5),
    "theta": (-0.5, -0.3, -0.1),
}

#: Desk-scale grid: two values per dimension (64 points).
DESK_GRID_LEVELS = {
    "r": (0.01, 0.1),
    "q": (0.01, 0.1),
    "T": (0.1, 1.1),
    "sigma": (0.1, 0.4),
    "nu": (0.1, 0.5),
    "theta": (-0.5, -0.1),
}

#: Half-density grid: every other level of the full grid plus the end points.
HALF_GRID_LEVELS = {
    "r": (0.01, 0.04, 0.1),
    "q": (0.01, 0.04, 0.1),
    "T": (0.1, 0.5, 0.9, 1.1),
    "sigma": (0.1, 0.2, 0.4),
    "nu": (0.1, 0.3, 0.5),
    "theta": (-0.5, -0.3, -0.1),
}


def grid_points(levels: dict) -> list[tuple[float, ...]]:
    """Cartesian product of per-dimension levels in ``THETA_NAMES`` order."""
    return [tuple(map(float, t)) for t in itertools.product(*(levels[n] for n in THETA_NAMES))]


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class PrecalcRecord:
    """FD-optimal premium parameters and residuals for one grid point."""

    theta: tuple[float, ...]
    lambda_opt: float
    x_star_opt: float
    g_values: tuple[float, ...]
    k0: float = K0

    def __post_init__(self) -> None:
        if len(self.theta) != 6:
            raise ValueError("theta must have six components")
        if not self.lambda_opt < 0:
            raise ValueError(f"lambda_opt must be negative, got {self.lambda_opt}")
        if not self.x_star_opt < math.log(self.k0):
            raise ValueError("x_star_opt must lie below ln k0")
        if not all(math.isfinite(g) for g in self.g_values):
            raise ValueError("g values must be finite")

    def fields(self) -> list[tuple[str, float]]:
        out = list(zip(THETA_NAMES, self.theta))
        out += [("k0", self.k0), ("lambda_opt", self.lambda_opt), ("x_star_opt", self.x_star_opt)]
        out += [(f"g_{i}", g) for i, g in enumerate(self.g_values)]
        return out

    def to_line(self) -> str:
        return ",".join(f"{k}={v:.17g}" for k, v in self.fields())

    @classmethod
    def from_line(cls, line: str) -> "PrecalcRecord":
        vals = {}
        for item in line.strip().split(","):
            key, _, val = item.partition("=")
            vals[key] = float(val)
        n_g = sum(1 for key in vals if key.startswith("g_"))
        return cls(
            theta=tuple(vals[n] for n in THETA_NAMES),
            lambda_opt=vals["lambda_opt"],
            x_star_opt=vals["x_star_opt"],
            g_values=tuple(vals[f"g_{i}"] for i in range(n_g)),
            k0=vals["k0"],
        )


class RecordFailure(PricingError):
    """A grid point whose pre-calculation failed; carries the offending theta."""

    def __init__(self, theta, cause: Exception):
        super().__init__(f"theta={theta}: {type(cause).__name__}: {cause}")
        self.theta = tuple(theta)
        self.cause = cause


def split_theta(theta: Sequence[float]) -> tuple[MarketEnv, VgParams]:
    r, q, T, sigma, nu, th = map(float, theta)
    return MarketEnv(r, q, T), VgParams(sigma, nu, th)


def _in_full_ranges(theta) -> bool:
    return all(
        min(FULL_GRID_LEVELS[n]) - 1e-12 <= v <= max(FULL_GRID_LEVELS[n]) + 1e-12
        for n, v in zip(THETA_NAMES, theta)
    )


def build_record(theta: Sequence[float], k0: float = K0, n: int = N_DEFAULT,
                 grid: tuple[int, int] = pide_fd.FD_FINE) -> PrecalcRecord:
    """FD boundary and slope at ``k0``, then the residual at the collocation points."""
    theta = tuple(map(float, theta))
    if not _in_full_ranges(theta):
        warnings.warn(f"theta {theta} lies outside the pre-calculation ranges", stacklevel=2)
    try:
        env, p = split_theta(theta)
        fd_grid = pide_fd.make_grid(env, p, k0, *grid)
        sol = pide_fd.solve(env, p, k0, grid=fd_grid, exercise="both")
        if sol.x_star is None:
            # deep boundaries (q well above r) can fall below the default grid
            fd_grid = pide_fd.make_grid(env, p, k0, *grid, lower_pad=DEEP_PAD)
            sol = pide_fd.solve(env, p, k0, grid=fd_grid, exercise="both")
        x_star = pide_fd.extract_boundary(sol, k0)
        lam = pide_fd.extract_lambda(sol, x_star, k0)
        problem = OideProblem(k0, env, p, curve=build_curve(env, p), n=n)
        x_star = _consistent_boundary(problem, sol, x_star)
        fit = problem.fit(lam, x_star)
        g = problem.g_vector(fit)
    except (PricingError, ValueError) as exc:
        raise RecordFailure(theta, exc) from exc
    return PrecalcRecord(theta, float(lam), float(x_star), tuple(float(v) for v in g), float(k0))


# ---------------------------------------------------------------------------
# dataset files


def _consistent_boundary(problem: OideProblem, sol, x_star: float) -> float:
    """Move an FD boundary where the FFT exercise value is not positive.

    When q is well above r the American price leaves the payoff very
    slowly, and the FD boundary can sit where the FFT European already
    exceeds the payoff by about the FD discretisation error.  The boundary
    is then moved down to where ``K - e^x - p(e^x)`` equals the FD premium
    at the FD boundary, which keeps the premium level of the FD solution.
    """
    w0 = float(problem.exercise_value(x_star))
    if w0 > 0.0:
        return x_star
    target = float(np.interp(x_star, sol.x, sol.premium))
    if not target > 0.0:
        raise BoundaryInfeasible(f"no positive premium at the FD boundary x* = {x_star:.6f}")
    lo = problem.lk - XSTAR_GAP_BOX[1]
    if not float(problem.exercise_value(lo)) > target:
        raise BoundaryInfeasible("exercise value never reaches the FD premium")
    moved = optimize.brentq(lambda x: float(problem.exercise_value(x)) - target, lo, x_star,
                            xtol=1e-12)
    log.info("boundary moved from %.6f to %.6f to match the FD premium", x_star, moved)
    return moved


def _key(theta) -> tuple[float, ...]:
    return tuple(round(float(v), 12) for v in theta)


def write_dataset(records: Iterable[PrecalcRecord], path) -> None:
    """Write records atomically (temporary file plus rename)."""
    path = Path(path)
    records = list(records)
    names = ",".join(k for k, _ in records[0].fields()) if records else ""
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(f"# {FORMAT_TAG} fields={names}\n")
        for rec in records:
            fh.write(rec.to_line() + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read_lines(path: Path) -> list[PrecalcRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.endswith("\n"):
                break  # torn final line from an interrupted append
            if line.startswith("#") or not line.strip():
                continue
            out.append(PrecalcRecord.from_line(line))
    return out


def read_dataset(path) -> list[PrecalcRecord]:
    path = Path(path)
    with open(path) as fh:
        head = fh.readline()
    if not head.startswith("#") or FORMAT_TAG not in head:
        raise ValueError(f"{path} is not a {FORMAT_TAG} dataset")
    return _read_lines(path)


def dataset_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class BuildReport:
    written: int
    skipped: int
    failed: list[tuple[tuple[float, ...], str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def _record_or_failure(theta):
    try:
        return build_record(theta)
    except RecordFailure as exc:
        return exc


def build_dataset(grid: Sequence[Sequence[float]], path, workers: int = 1,
                  progress=None) -> BuildReport:
    """Pre-calculate every grid point into ``path``; resumable.

    Finished records are appended to ``<path>.partial`` one line at a time so
    an interrupted run loses at most the record in flight.  When every point
    is done the records are rewritten to ``path`` in grid order, so a
    resumed run produces the same file as an uninterrupted one.
    """
    path = Path(path)
    partial = path.with_name(path.name + ".partial")
    done: dict[tuple, PrecalcRecord] = {}
    if path.exists():
        for rec in read_dataset(path):
            done[_key(rec.theta)] = rec
    if partial.exists():
        recs = _read_lines(partial)
        for rec in recs:
            done[_key(rec.theta)] = rec
        # drop a torn tail so later appends start on a fresh line
        with open(partial, "w") as fh:
            fh.write(f"# {FORMAT_TAG} partial\n")
            for rec in recs:
                fh.write(rec.to_line() + "\n")
    todo = [tuple(map(float, t)) for t in grid if _key(t) not in done]
    report = BuildReport(written=0, skipped=len(grid) - len(todo))
    if todo:
        new_file = not partial.exists()
        with open(partial, "a") as fh:
            if new_file:
                fh.write(f"# {FORMAT_TAG} partial\n")
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    results = pool.map(_record_or_failure, todo, chunksize=1)
                    report = _consume(results, todo, fh, done, report, progress)
            else:
                results = map(_record_or_failure, todo)
                report = _consume(results, todo, fh, done, report, progress)
    ordered = [done[_key(t)] for t in grid if _key(t) in done]
    if ordered and not report.failed:
        write_dataset(ordered, path)
        if partial.exists():
            partial.unlink()
    return report


def _consume(results, todo, fh, done, report, progress):
    for i, res in enumerate(results):
        if isinstance(res, RecordFailure):
            report.failed.append((res.theta, str(res.cause)))
            log.warning("pre-calculation failed for %s: %s", res.theta, res.cause)
        else:
            fh.write(res.to_line() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
            done[_key(res.theta)] = res
            report.written += 1
        if progress is not None:
            progress(i + 1, len(todo))
    return report


# ---------------------------------------------------------------------------
# kernel regression


def _response(records: Sequence[PrecalcRecord], response: str) -> np.ndarray:
    if response == "lambda_opt":
        return np.array([r.lambda_opt for r in records])
    if response == "x_star_opt":
        return np.array([r.x_star_opt - math.log(r.k0) for r in records])
    if response.startswith("g_"):
        i = int(response[2:])
        return np.array([r.g_values[i] * (K0 / r.k0) for r in records])
    raise ValueError(f"unknown response {response!r}")


class _Design:
    """Kernel sums over a training subset, separable when the data is a full grid."""

    def __init__(self, X: np.ndarray):
        self.X = X
        self.levels = [np.unique(X[:, j]) for j in range(X.shape[1])]
        shape = tuple(len(lv) for lv in self.levels)
        self.idx = np.stack(
            [np.searchsorted(lv, X[:, j]) for j, lv in enumerate(self.levels)], axis=1
        )
        flat = np.ravel_multi_index(self.idx.T, shape)
        self.separable = int(np.prod(shape)) == len(X) and len(np.unique(flat)) == len(X)
        self.shape = shape
        self.flat = flat
        self.sq = [(lv[:, None] - lv[None, :]) ** 2 for lv in self.levels]

    def predict_all(self, a: np.ndarray, train: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Nadaraya-Watson estimates at every design point from the rows in ``train``."""
        if self.separable:
            mask = np.zeros(self.shape)
            ysum = np.zeros(self.shape)
            mask.flat[self.flat[train]] = 1.0
            ysum.flat[self.flat[train]] = y[train]
            for j, sq in enumerate(self.sq):
                kj = np.exp(-a[j] * sq)
                mask = np.moveaxis(np.tensordot(kj, mask, axes=([1], [j])), 0, j)
                ysum = np.moveaxis(np.tensordot(kj, ysum, axes=([1], [j])), 0, j)
            num = ysum.flat[self.flat]
            den = mask.flat[self.flat]
        else:
            Xt = self.X[train]
            out_num = np.empty(len(self.X))
            out_den = np.empty(len(self.X))
            for lo in range(0, len(self.X), 512):
                d2 = ((self.X[lo:lo + 512, None, :] - Xt[None, :, :]) ** 2) @ a
                w = np.exp(-(d2 - d2.min(axis=1, keepdims=True)))
                out_num[lo:lo + 512] = w @ y[train]
                out_den[lo:lo + 512] = w.sum(axis=1)
            num, den = out_num, out_den
        with np.errstate(invalid="ignore", divide="ignore"):
            pred = num / den
        # underflowed weights: fall back to the nearest training point
        bad = ~np.isfinite(pred)
        if np.any(bad):
            Xt = self.X[train]
            for i in np.nonzero(bad)[0]:
                pred[i] = y[train][np.argmin(((Xt - self.X[i]) ** 2) @ a)]
        return pred


@dataclass
class KernelModel:
    """Gaussian-kernel Nadaraya-Watson regressor for one response."""

    bandwidths: np.ndarray
    response: str
    X: np.ndarray
    y: np.ndarray
    degenerate: bool = False
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.bandwidths = np.asarray(self.bandwidths, dtype=float)
        if not np.all(self.bandwidths > 0):
            raise ValueError("bandwidths must be positive")
        if len(self.X) == 0:
            raise ValueError("empty dataset")

    def predict(self, theta) -> float:
        t = np.asarray(theta, dtype=float)
        d2 = ((self.X - t) ** 2) @ self.bandwidths
        w = np.exp(-(d2 - d2.min()))
        return float(w @ self.y / w.sum())


def fit_bandwidths(records: Sequence[PrecalcRecord], response: str, split: float = 0.75,
                   repeats: int = 5, seed: int = 0, score: str = "all",
                   max_evals: int = 600, restarts: int = 2) -> KernelModel:
    """Bandwidths minimising the squared prediction error from random training subsets.

    Each repeat draws a training subset ``S`` of ``split * n`` records and
    minimises ``sum_i (y_i - yhat_i^S(a))^2`` over ``ln a`` by Nelder-Mead.
    With ``score="all"`` the sum runs over every record, with
    ``score="holdout"`` only over records outside ``S``.  The returned
    bandwidths are the componentwise mean of the per-repeat optima; a
    restarted simplex (``restarts``) is used for each repeat.
    """
    if len(records) < 20:
        raise ValueError("bandwidth fitting needs at least 20 records")
    if score not in ("all", "holdout"):
        raise ValueError("score must be 'all' or 'holdout'")
    X = np.array([r.theta for r in records], dtype=float)
    y = _response(records, response)
    design = _Design(X)
    span = X.max(axis=0) - X.min(axis=0)
    span[span == 0] = 1.0
    z0 = np.log(1.0 / (2.0 * span**2))
    rng = np.random.default_rng(seed)
    n = len(records)
    n_train = max(1, int(round(split * n)))
    found, losses, splits = [], [], []
    for _ in range(repeats):
        perm = rng.permutation(n)
        train = np.sort(perm[:n_train])
        scored = np.ones(n, bool) if score == "all" else np.isin(np.arange(n), train, invert=True)

        def objective(z, train=train, scored=scored):
            pred = design.predict_all(np.exp(z), train, y)
            return float(np.sum((y[scored] - pred[scored]) ** 2))

        # a restarted simplex escapes the collapsed simplices Nelder-Mead
        # often ends in on this rough, box-bounded objective
        start = np.clip(z0, -10, 10)
        for _ in range(restarts + 1):
            res = optimize.minimize(
                objective, start, method="Nelder-Mead",
                bounds=[(-10.0, 10.0)] * X.shape[1],
                options={"maxfev": max_evals, "xatol": 1e-4, "fatol": 1e-12},
            )
            start = res.x
        found.append(res.x)
        losses.append(float(res.fun))
        splits.append((train, scored, objective))
    # the bandwidths themselves are averaged (not their logarithms), so a
    # repeat that switched a dimension off does not drag the others down
    z = np.log(np.mean(np.exp(found), axis=0))
    # the averaged bandwidths scored on each repeat's own split
    averaged = [float(obj(z)) for _, _, obj in splits]
    degenerate = bool(np.any(np.abs(np.asarray(found)) > 10.0 - 1e-3))
    if degenerate:
        warnings.warn(f"bandwidth for {response} reached the search box bound", DegenerateFitWarning,
                      stacklevel=2)
    diagnostics = {"repeat_losses": losses, "averaged_losses": averaged,
                   "repeat_log_bandwidths": [list(map(float, f)) for f in found]}
    return KernelModel(np.exp(z), response, X, y, degenerate, diagnostics)


class DegenerateFitWarning(UserWarning):
    """A fitted bandwidth sits on the search box bound."""


@dataclass
class ModelBundle:
    """The nine kernel models used by the pricer, sharing one design matrix."""

    models: dict[str, KernelModel]
    checksum: str = ""
    k0: float = K0

    def __post_init__(self) -> None:
        first = self.models[RESPONSES[0]]
        self._X = first.X
        self._A = np.stack([self.models[r].bandwidths for r in RESPONSES])
        self._Y = np.stack([self.models[r].y for r in RESPONSES], axis=1)
        self._steps = [np.diff(np.unique(first.X[:, j])) for j in range(first.X.shape[1])]
        design = _Design(first.X)
        self._levels = design.levels if design.separable else None
        if self._levels is not None:
            self._Ygrid = np.zeros(design.shape + (len(RESPONSES),))
            self._Ygrid[tuple(design.idx.T)] = self._Y

    def predict_all(self, theta) -> np.ndarray:
        """All nine responses at ``theta`` (g_0..g_N at K0, lambda, x* - ln K0)."""
        theta = np.asarray(theta, dtype=float)
        if self._levels is not None:
            # on a full grid the Gaussian weight factorises over dimensions, so
            # the sums contract one dimension at a time; shifting each factor
            # by its own minimum guards against underflow
            num = self._Ygrid
            den = np.ones(len(RESPONSES))
            for lv, a, t in zip(self._levels, self._A.T, theta):
                d2 = np.outer((lv - t) ** 2, a)
                kj = np.exp(-(d2 - d2.min(axis=0)))
                num = np.einsum("i...r,ir->...r", num, kj)
                den = den * kj.sum(axis=0)
            return num / den
        d2 = ((self._X - theta) ** 2) @ self._A.T
        w = np.exp(-(d2 - d2.min(axis=0)))
        return np.einsum("ij,ij->j", w, self._Y) / w.sum(axis=0)

    def hull_check(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if self._levels is not None:
            # on a full grid the nearest record takes the nearest level per dimension
            nearest = np.array([np.abs(lv - t).min() for lv, t in zip(self._levels, theta)])
        else:
            diff = np.abs(self._X - theta)
            nearest = diff[np.argmin((diff**2).sum(axis=1))]
        steps = np.array([s.max() if s.size else 0.0 for s in self._steps])
        if np.all(nearest > steps):
            warnings.warn(f"theta {tuple(theta)} is more than one grid step from every record",
                          HullWarning, stacklevel=3)


class HullWarning(UserWarning):
    """Prediction requested far from the pre-calculated grid."""


def predict_correction(theta, k: float, bundle: ModelBundle, n: int = N_DEFAULT) -> CorrectionVector:
    """Estimated correction vector at strike ``k`` (homogeneous of degree one in K)."""
    bundle.hull_check(theta)
    vals = bundle.predict_all(theta)[: n + 1]
    return CorrectionVector(vals * (k / bundle.k0), float(k), n)


def predict_init(theta, k: float, bundle: ModelBundle, problem: OideProblem | None = None,
                 k0: float | None = None) -> PremiumFit:
    """Warm start from the lambda and x* models, shifted to strike ``k``."""
    k0 = bundle.k0 if k0 is None else k0
    vals = bundle.predict_all(theta)
    return init_from_predictions(vals, k, k0, problem)


def init_from_predictions(vals: np.ndarray, k: float, k0: float,
                          problem: OideProblem | None = None) -> PremiumFit:
    n = len(vals) - 3
    lam = float(min(max(vals[n + 1], LAMBDA_BOX[0]), LAMBDA_BOX[1]))
    # the x* model is fitted on x* - ln K0, so x*(K) = ln K + prediction
    gap = float(min(max(-vals[n + 2], XSTAR_GAP_BOX[0]), XSTAR_GAP_BOX[1]))
    x_star = math.log(k) - gap
    b = math.nan
    if problem is not None:
        try:
            b = problem.b_from(x_star)
        except PricingError:
            pass
    return PremiumFit(lam, x_star, b)


def fit_bundle(records: Sequence[PrecalcRecord], seed: int = 0, split: float = 0.75,
               repeats: int = 5, score: str = "all", checksum: str = "") -> ModelBundle:
    models = {
        resp: fit_bandwidths(records, resp, split=split, repeats=repeats, seed=seed, score=score)
        for resp in RESPONSES
    }
    return ModelBundle(models, checksum=checksum, k0=records[0].k0)


def save_bundle(bundle: ModelBundle, path) -> None:
    payload = {
        "format": MODEL_TAG,
        "dataset_sha256": bundle.checksum,
        "k0": bundle.k0,
        "models": [
            {"response": r, "bandwidths": list(map(float, m.bandwidths)),
             "degenerate": m.degenerate}
            for r, m in bundle.models.items()
        ],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2))
    os.replace(tmp, path)


def load_bundle(model_path, dataset_path, verify: bool = True) -> ModelBundle:
    """Rebuild the bundle from bandwidths and the dataset they were fitted on."""
    payload = json.loads(Path(model_path).read_text())
    if payload.get("format") != MODEL_TAG:
        raise ValueError(f"{model_path} is not a {MODEL_TAG} model file")
    checksum = dataset_checksum(dataset_path)
    if verify and payload["dataset_sha256"] and payload["dataset_sha256"] != checksum:
        raise ValueError("model was fitted on a different dataset (checksum mismatch)")
    records = read_dataset(dataset_path)
    X = np.array([r.theta for r in records], dtype=float)
    models = {}
    for entry in payload["models"]:
        resp = entry["response"]
        models[resp] = KernelModel(np.array(entry["bandwidths"]), resp, X,
                                   _response(records, resp), entry.get("degenerate", False))
    return ModelBundle(models, checksum=checksum, k0=payload.get("k0", K0))
