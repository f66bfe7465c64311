"""Exponential-premium approximation of the time-free VG pricing equation.

The early-exercise premium at t = 0 is modelled as::

    w(x) = K - e^x - p(e^x)            x <= x*
    w(x) = exp(lam (x - x*) + b)       x >  x*

and the residual of the integro-differential equation,

    g(x) = (r - q + omega) w'(x) - r/(1 - e^{-rT}) w(x) + int (w(x+y) - w(x)) k(y) dy,

is matched to correction targets at ``N + 1`` collocation points by a
derivative-free search over ``(lam, x*)``.

Integral bookkeeping for ``x = x* + d``, ``d >= 0``:

* ``y > 0``: ``w(x) ln(lambda_p / (lambda_p - lam)) / nu`` (Frullani),
* ``-d < y < 0``: ``w(x) (Ein(lambda_n d) - Ein((lambda_n + lam) d)) / nu``,
* ``y < -d``: exercise branch.  With ``K - S - p(S) = K(1-e^{-rT}) - S(1-e^{-qT}) - c(S)``
  everything except the call ``c`` integrates against ``k`` in closed form
  (``E1``); the call part, and a short panel next to ``x*``, use composite
  Gauss-Legendre with a breakpoint at the density cusp of ``ln S(T)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import _kernels as _k
from .errors import (BoundaryInfeasible, ConvergenceFailure, DomainError, NoExerciseRegion,
                     OptimizationFailure)
from .euro_fft import EuroCurve, cached_curve
from .vg_model import MarketEnv, VgParams, lambda_pn, martingale_drift

N_DEFAULT = 6
LAMBDA_BOX = (-60.0, -1e-3)
XSTAR_GAP_BOX = (1e-4, 3.0)  # ln K - x*
R_ZERO = 1e-8


@dataclass(frozen=True)
class PremiumFit:
    """Premium parameters ``(lam, x_star, b)``."""

    lam: float
    x_star: float
    b: float


@dataclass(frozen=True)
class CorrectionVector:
    """Correction targets E(x_i) at the collocation points, quoted at strike ``k_ref``."""

    values: np.ndarray
    k_ref: float
    n: int = N_DEFAULT

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.n + 1,):
            raise ValueError(f"expected {self.n + 1} correction values, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("correction values must be finite")
        object.__setattr__(self, "values", vals)

    def at_strike(self, k: float) -> "CorrectionVector":
        """Rescale to another strike; g is homogeneous of degree one in K."""
        return CorrectionVector(self.values * (k / self.k_ref), k, self.n)


def oide_coefficient(env: MarketEnv) -> float:
    """r / (1 - e^{-rT}); below ``R_ZERO`` its expansion 1/T + r/2 is used."""
    if env.r < R_ZERO:
        return 1.0 / env.T + 0.5 * env.r
    return env.r / -math.expm1(-env.r * env.T)


def collocation_points(x_star: float, k: float, n: int = N_DEFAULT) -> np.ndarray:
    """x_i = x* + (2i/N)(ln K - x*), i = 0..N."""
    lk = math.log(k)
    if not x_star < lk:
        raise DomainError("collocation needs x* < ln K")
    return x_star + (2.0 * np.arange(n + 1) / n) * (lk - x_star)


class OideProblem:
    """Residual, loss and fit for one ``(K, env, params)`` triple.

    The European curve is shared by every evaluation; its arrays and the
    problem constants are packed once for the compiled kernels.
    """

    def __init__(self, k: float, env: MarketEnv, p: VgParams, curve: EuroCurve | None = None,
                 n: int = N_DEFAULT):
        if not k > 0:
            raise DomainError("strike must be positive")
        self.k, self.env, self.p, self.n = float(k), env, p, n
        self.curve = curve or cached_curve(env, p)
        self.lk = math.log(k)
        self.lp, self.ln = lambda_pn(p)
        self.nu = p.nu
        self.mu = env.r - env.q + martingale_drift(p)
        self.rho = oide_coefficient(env)
        self.z_cusp = self.lk - self.mu * env.T
        self._calls = np.ascontiguousarray(self.curve.call_prices)
        self._cst = np.array([
            self.lk,
            self.k * -math.expm1(-env.r * env.T),
            -math.expm1(-env.q * env.T),
            self.lp,
            self.ln,
            self.nu,
            self.mu,
            self.rho,
            self.z_cusp,
            self.curve._m0,
            self.curve._dm,
            self.curve.hi,
        ])

    # -- premium -------------------------------------------------------------
    def exercise_value(self, z):
        """K - e^z - p(e^z) for log-spots z below ln K plus the curve's lower edge."""
        z = np.asarray(z, dtype=float)
        out = np.array([_k.exercise_value(float(zi), self._cst, self._calls) for zi in z.ravel()])
        return out.reshape(z.shape)[()] if z.ndim == 0 else out.reshape(z.shape)

    def b_from(self, x_star: float) -> float:
        if not x_star < self.lk:
            raise BoundaryInfeasible("x* must lie below ln K")
        w0 = _k.exercise_value(float(x_star), self._cst, self._calls)
        if not w0 > 0:
            raise BoundaryInfeasible(
                f"K - e^x* - p(e^x*) = {w0:.3e} <= 0 at x* = {x_star:.6f}"
            )
        return math.log(w0)

    def fit(self, lam: float, x_star: float) -> PremiumFit:
        if not lam < 0:
            raise DomainError("premium slope must be negative")
        return PremiumFit(float(lam), float(x_star), self.b_from(x_star))

    def premium_w(self, x, fit: PremiumFit):
        x = np.asarray(x, dtype=float)
        below = x <= fit.x_star
        out = np.exp(fit.lam * np.where(below, 0.0, x - fit.x_star) + fit.b)
        if np.any(below):
            out = np.where(below, 0.0, out)
            out[below] = self.exercise_value(x[below])
        return out[()] if out.ndim == 0 else out

    # -- residual --------------------------------------------------------------
    def g_eval(self, x, fit: PremiumFit):
        """Residual g at log-spots x >= x*."""
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(xs < fit.x_star):
            raise DomainError("residual is only defined on x >= x*")
        if not fit.lam < self.lp:
            raise DomainError("premium slope must stay below lambda_p")
        out = np.empty_like(xs)
        for i, xi in enumerate(xs):
            d = float(xi - fit.x_star)
            A, B = _k.exercise_parts(float(xi), fit.x_star, self._cst, self._calls)
            wx = math.exp(fit.lam * d + fit.b)
            out[i] = wx * (_k.lambda_factor(fit.lam, d, self._cst) - B) + A
        if not np.all(np.isfinite(out)):
            raise ConvergenceFailure("non-finite residual")
        return out[0] if np.ndim(x) == 0 else out

    def g_vector(self, fit: PremiumFit) -> np.ndarray:
        d, A, B, b = _k.collocation_parts(fit.x_star, self.n, self._cst, self._calls)
        if not math.isfinite(b):
            raise BoundaryInfeasible("K - e^x* - p(e^x*) <= 0")
        return _k.g_from_parts(fit.lam, d, A, B, fit.b, self._cst)

    def loss(self, fit: PremiumFit, targets: CorrectionVector) -> float:
        return float(np.sum((self.g_vector(fit) - self._targets(targets)) ** 2))

    def _targets(self, targets: CorrectionVector) -> np.ndarray:
        if targets.n != self.n:
            raise ValueError(f"targets have N={targets.n}, problem uses N={self.n}")
        return targets.at_strike(self.k).values

    def loss_scale(self) -> float:
        """(r/(1-e^{-rT}) * w(ln K))^2 with w(ln K) taken as the European put at the money."""
        w = self.k * float(self.curve.put(0.0)[0])
        return (self.rho * w) ** 2

    # -- solve -----------------------------------------------------------------
    def solve_fit(self, targets: CorrectionVector, init: PremiumFit,
                  method: str = "profile", max_evals: int = 400) -> tuple[PremiumFit, float, int]:
        """Minimise the collocation loss from ``init``.

        ``method="profile"`` (default) minimises over ln(-lam) for each
        trial boundary and runs a bounded Brent search over ln(ln K - x*)
        on that profile.  ``method="simplex"`` runs Nelder-Mead jointly in
        the same coordinates.  Returns the fit, terminal loss and number of
        boundary evaluations.
        """
        tv = np.ascontiguousarray(self._targets(targets))
        scale = self.loss_scale()
        penalty = 1e6 * (1.0 + scale)
        s_lo, s_hi = math.log(-LAMBDA_BOX[1]), math.log(-LAMBDA_BOX[0])
        t_lo, t_hi = math.log(XSTAR_GAP_BOX[0]), math.log(XSTAR_GAP_BOX[1])
        lam0 = min(max(init.lam, LAMBDA_BOX[0]), LAMBDA_BOX[1])
        gap0 = min(max(self.lk - init.x_star, XSTAR_GAP_BOX[0]), XSTAR_GAP_BOX[1])
        s0, t0 = math.log(-lam0), math.log(gap0)

        def joint(z):
            d, A, B, b = _k.collocation_parts(self.lk - math.exp(z[1]), self.n, self._cst, self._calls)
            if not math.isfinite(b):
                return penalty
            return _k.loss_from_parts(-math.exp(z[0]), d, A, B, b, self._cst, tv)

        # the start point is scored at its exact coordinates so that an init
        # that already solves the problem is returned unchanged
        x_init = self.lk - gap0
        d, A, B, b = _k.collocation_parts(x_init, self.n, self._cst, self._calls)
        f_init = _k.loss_from_parts(lam0, d, A, B, b, self._cst, tv) if math.isfinite(b) else penalty
        t_feas = _k.feasible_edge(t_lo, t_hi, self._cst, self._calls)
        if not math.isfinite(t_feas):
            # the European put exceeds the payoff over the whole box, so the
            # put is not exercised above S = K e^{-gap_max}
            raise NoExerciseRegion("boundary infeasible everywhere in the box")
        # below t_feas the European exceeds intrinsic and b is undefined
        t_feas = min(t_hi, t_feas + 1e-9)
        t_start = max(t0, t_feas)
        if method == "simplex":
            best = (np.array([s0, t_start]), joint((s0, t_start)))
            nev = 1
            for dz in ((0.0, 0.0), (0.15, 0.0), (0.0, 0.15), (-0.15, -0.15)):
                z_start = np.clip(best[0] + dz, (s_lo, t_feas), (s_hi, t_hi))
                simplex = np.array([z_start, z_start + (0.05, 0.0), z_start + (0.0, 0.05)])
                res = optimize.minimize(
                    joint, z_start, method="Nelder-Mead",
                    bounds=[(s_lo, s_hi), (t_feas, t_hi)],
                    options={"initial_simplex": simplex, "xatol": 1e-8,
                             "fatol": 1e-16 * scale, "maxfev": max_evals},
                )
                nev += res.nfev
                if res.fun < best[1]:
                    best = (res.x, float(res.fun))
                if best[1] <= 1e-4 * scale:
                    break
            s_best, t_best = best[0]
            f_best = best[1]
        elif method == "profile":
            nev = 0
            lo, hi = max(t_feas, t_start - 0.5), min(t_hi, t_start + 0.5)
            t_best, s_best, f_best, nev = _k.brent_outer(
                lo, hi, 1e-6, self.n, self._cst, self._calls, tv, s_lo, s_hi, penalty)
            edge_lo = t_best - lo < 1e-4 and lo > t_feas
            edge_hi = hi - t_best < 1e-4 and hi < t_hi
            if edge_lo or edge_hi:
                # the local bracket missed the basin: scan the feasible range
                grid = np.linspace(t_feas, t_hi, 13)
                vals = [_k.profile_loss(t, self.n, self._cst, self._calls, tv, s_lo, s_hi,
                                        penalty)[0] for t in grid]
                j = int(np.argmin(vals))
                lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, 12)]
                t2, s2, f2, n2 = _k.brent_outer(
                    lo, hi, 1e-6, self.n, self._cst, self._calls, tv, s_lo, s_hi, penalty)
                nev += n2 + 13
                if f2 < f_best:
                    t_best, s_best, f_best = t2, s2, f2
        else:
            raise ValueError(f"unknown method {method!r}")
        if f_best >= penalty:
            raise OptimizationFailure("no feasible premium parameters found")
        if f_init <= f_best:
            return self.fit(lam0, x_init), float(f_init), int(nev)
        lam, xs = -math.exp(s_best), self.lk - math.exp(t_best)
        return self.fit(lam, xs), float(f_best), int(nev)

    def price(self, s0: float, fit: PremiumFit) -> float:
        """American put from the fitted premium."""
        x0 = math.log(s0)
        if x0 <= fit.x_star:
            return self.k - s0
        euro = s0 * float(self.curve.put(self.lk - x0)[0])
        return euro + math.exp(fit.lam * (x0 - fit.x_star) + fit.b)


# -- functional wrappers ------------------------------------------------------


def b_from(x_star: float, k: float, env: MarketEnv, p: VgParams) -> float:
    return OideProblem(k, env, p).b_from(x_star)


def premium_w(x, fit: PremiumFit, k: float, env: MarketEnv, p: VgParams):
    return OideProblem(k, env, p).premium_w(x, fit)


def g_eval(x, k: float, fit: PremiumFit, env: MarketEnv, p: VgParams):
    return OideProblem(k, env, p).g_eval(x, fit)


def loss(fit: PremiumFit, targets: CorrectionVector, k: float, env: MarketEnv, p: VgParams) -> float:
    return OideProblem(k, env, p, n=targets.n).loss(fit, targets)


def solve_fit(targets: CorrectionVector, k: float, env: MarketEnv, p: VgParams,
              init: PremiumFit) -> PremiumFit:
    return OideProblem(k, env, p, n=targets.n).solve_fit(targets, init)[0]


def price_american(s0: float, k: float, env: MarketEnv, p: VgParams, fit: PremiumFit) -> float:
    return OideProblem(k, env, p).price(s0, fit)
