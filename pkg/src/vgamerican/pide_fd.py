"""Implicit finite differences for the VG pricing PIDE in log-spot.

Jumps smaller than one grid spacing ``h`` are replaced by a diffusion
``sigma^2(h)/2`` and a drift correction ``omega(h)``; larger jumps enter
through a Toeplitz quadrature of the piecewise-linear interpolant against
exact cell integrals of ``k``.  Local terms are implicit (banded solve) and
the far-jump integral is explicit, extrapolated from the two previous levels
so that the BDF2 time stepping stays second order.  The American value is
projected onto the payoff after each step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special
from scipy.signal import fftconvolve

from .errors import DegenerateWindow, GridTooCoarse, NoExerciseRegion, NumericalFailure
from .vg_model import MarketEnv, VgParams, lambda_pn, truncated_drift, truncated_variance


@dataclass(frozen=True)
class FdGrid:
    n_space: int
    m_time: int
    x_min: float
    x_max: float

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_space)

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_space - 1)


FD_FINE = (3000, 250)
FD_COARSE = (800, 80)


def make_grid(env: MarketEnv, p: VgParams, k: float, n_space: int, m_time: int,
              lower_pad: float = 0.0) -> FdGrid:
    """Grid over ln K -/+ (4 s sqrt(T) + 2) with s^2 the VG variance rate.

    ``lower_pad`` extends the grid below ln K, for boundaries deeper than
    the default half-width.
    """
    half = 4.0 * math.sqrt(p.variance * env.T) + 2.0
    lk = math.log(k)
    return FdGrid(n_space, m_time, lk - half - lower_pad, lk + half)


def fine_grid(env, p, k) -> FdGrid:
    return make_grid(env, p, k, *FD_FINE)


def coarse_grid(env, p, k) -> FdGrid:
    return make_grid(env, p, k, *FD_COARSE)


@dataclass
class FdSolution:
    x: np.ndarray
    american_prices: np.ndarray | None
    european_prices: np.ndarray | None
    k: float
    env: MarketEnv
    params: VgParams
    x_star: float | None = None
    lambda_hat: float | None = None

    @property
    def premium(self) -> np.ndarray:
        if self.american_prices is None or self.european_prices is None:
            raise ValueError("premium needs both American and European solves")
        return self.american_prices - self.european_prices

    def price_at(self, s0: float, which: str = "american") -> float:
        """Cubic interpolation of the nodal values at log-spot ln s0."""
        vals = self.american_prices if which == "american" else self.european_prices
        return float(_cubic_at(self.x, vals, math.log(s0)))


def _cubic_at(x: np.ndarray, v: np.ndarray, x0: float) -> float:
    h = x[1] - x[0]
    t = (x0 - x[0]) / h
    i = int(math.floor(t))
    if i < 1 or i > len(x) - 3:
        raise GridTooCoarse(f"log-spot {x0:.4f} too close to the grid edge")
    f = t - i
    fm1, f0, f1, f2 = f + 1.0, f, f - 1.0, f - 2.0
    w = (-f0 * f1 * f2 / 6.0, fm1 * f1 * f2 / 2.0, -fm1 * f0 * f2 / 2.0, fm1 * f0 * f1 / 6.0)
    return sum(wi * v[i - 1 + j] for j, wi in enumerate(w))


def _cell_weights(lam: float, nu: float, h: float, n: int):
    """Per-offset weights of the far-jump quadrature on one side.

    Returns ``(w, a)`` with ``w[m]`` the weight of the node at offset m
    (m = 1..n-1, ``w[0] = 0``) and ``a[m]``, ``b[m]`` the zeroth and first
    cell moments of ``k`` over ``[m h, (m+1) h]``.
    """
    m = np.arange(n + 1, dtype=float)
    e1 = special.exp1(lam * h * np.maximum(m, 1.0))
    a = np.zeros(n + 1)
    a[1:n] = (e1[1:n] - e1[2 : n + 1]) / nu
    em = np.exp(-lam * h * m)
    c = np.zeros(n + 1)
    c[1:n] = (em[1:n] - em[2 : n + 1]) / (nu * lam)
    b = c - m * h * a
    b[0] = 0.0
    w = np.zeros(n + 1)
    w[1:n] = a[1:n] - b[1:n] / h + b[0 : n - 1] / h
    return w[:n], a, b


class _Operator:
    """Discretised PIDE operator for a fixed grid and parameter set."""

    def __init__(self, grid: FdGrid, env: MarketEnv, p: VgParams, drift_scheme: str):
        n, h = grid.n_space, grid.h
        lp, ln = lambda_pn(p)
        self.n, self.h = n, h
        self.x = grid.nodes
        self.ln = ln
        self.nu = p.nu
        s2 = truncated_variance(h, p)
        mu = env.r - env.q + truncated_drift(h, p) - 0.5 * s2
        lam_far = float(special.exp1(lp * h) + special.exp1(ln * h)) / p.nu
        self.diag_rate = env.r + lam_far
        self.mu, self.diff = mu, 0.5 * s2
        self.drift_scheme = drift_scheme

        wr, ar, br = _cell_weights(lp, p.nu, h, n)
        wl, al, bl = _cell_weights(ln, p.nu, h, n)
        kern = np.zeros(2 * n - 1)
        kern[n:] = wr[1:]
        kern[: n - 1] = wl[1:][::-1]
        self.kern_rev = kern[::-1].copy()
        j = np.arange(n)
        # node 0 only receives the half-cell (B) weight from its last interior cell
        self.left_edge_fix = np.zeros(n)
        self.left_edge_fix[1:] = al[j[1:]] - bl[j[1:]] / h
        # tail y < -j h lands below the grid
        with np.errstate(divide="ignore"):
            jh = j * h
            self.tail_k = np.where(j > 0, special.exp1(ln * jh) / p.nu, 0.0)
            self.tail_e = np.where(j > 0, np.exp(self.x) * special.exp1((ln + 1.0) * jh) / p.nu, 0.0)

    def banded(self, dt: float, theta_coef: float = 1.0):
        """Banded matrix ``I - c dt L_local`` for :func:`scipy.linalg.solve_banded`.

        ``drift_scheme`` selects central or first-order upwind (tridiagonal)
        or second-order upwind (pentadiagonal) differencing of the drift.
        """
        n, h, mu, d = self.n, self.h, self.mu, self.diff
        lo = np.full(n, d / h**2)
        up = np.full(n, d / h**2)
        di = np.full(n, -2 * d / h**2 - self.diag_rate)
        if self.drift_scheme == "central":
            lo -= mu / (2 * h)
            up += mu / (2 * h)
        elif self.drift_scheme == "upwind":
            if mu >= 0:
                up += mu / h
                di -= mu / h
            else:
                lo -= mu / h
                di += mu / h
        if self.drift_scheme in ("central", "upwind"):
            ab = np.zeros((3, n))
            ab[0, 1:] = -theta_coef * dt * up[:-1]
            ab[1] = 1.0 - theta_coef * dt * di
            ab[2, :-1] = -theta_coef * dt * lo[1:]
            ab[0, 1] = 0.0
            ab[1, 0] = 1.0
            ab[1, -1] = 1.0
            ab[2, -2] = 0.0
            return (1, 1), ab
        # upwind2: use 3-point one-sided stencil in the upwind direction
        ab = np.zeros((5, n))  # (2, 2) bands
        c = theta_coef * dt
        diag = 1.0 - c * di
        l1 = -c * lo
        u1 = -c * up
        l2 = np.zeros(n)
        u2 = np.zeros(n)
        if mu >= 0:
            # V_x ~ (-3V_j + 4V_{j+1} - V_{j+2}) / 2h
            diag = diag - c * (-3 * mu / (2 * h))
            u1 = u1 - c * (4 * mu / (2 * h))
            u2 = u2 - c * (-mu / (2 * h))
        else:
            diag = diag - c * (3 * mu / (2 * h))
            l1 = l1 - c * (-4 * mu / (2 * h))
            l2 = l2 - c * (mu / (2 * h))
        # row i: ab[2 + i - j, j] = A[i, j]
        ab[2] = diag
        ab[1, 1:] = u1[:-1]
        ab[0, 2:] = u2[:-2]
        ab[3, :-1] = l1[1:]
        ab[4, :-2] = l2[2:]
        # Dirichlet rows 0 and n-1
        ab[2, 0] = 1.0
        ab[1, 1] = 0.0
        ab[0, 2] = 0.0
        ab[2, -1] = 1.0
        ab[3, -2] = 0.0
        ab[4, -3] = 0.0
        return (2, 2), ab

    def jump(self, v: np.ndarray, lower_k: float, lower_e: float) -> np.ndarray:
        """Far-jump integral of v, excluding the implicit -lambda_far v term.

        Values below the grid are ``lower_k * K - lower_e * e^x`` style
        coefficients: the caller passes the strike and spot weights.
        """
        n = self.n
        out = fftconvolve(v, self.kern_rev)[n - 1 : 2 * n - 1]
        out -= self.left_edge_fix * v[0]
        out += lower_k * self.tail_k - lower_e * self.tail_e
        return out


def solve(env: MarketEnv, p: VgParams, k: float, grid: FdGrid | None = None,
          exercise: str = "american", drift_scheme: str = "upwind2",
          time_scheme: str = "bdf2") -> FdSolution:
    """Backward solve of the VG PIDE for a put of strike k.

    ``exercise`` is ``"american"``, ``"european"`` or ``"both"``.
    """
    grid = grid or fine_grid(env, p, k)
    if grid.n_space < 3 or grid.m_time < 1:
        raise GridTooCoarse("need at least 3 space nodes and 1 time step")
    lk = math.log(k)
    if not (grid.x_min < lk - 1.0 + 1e-12 and grid.x_max > lk + 1.0 - 1e-12):
        raise GridTooCoarse("grid must extend at least 1.0 beyond ln K on each side")
    op = _Operator(grid, env, p, drift_scheme)
    x = op.x
    payoff = np.maximum(k - np.exp(x), 0.0)
    modes = ("american", "european") if exercise == "both" else (exercise,)
    out = {}
    for mode in modes:
        out[mode] = _march(op, env, k, x, payoff, grid.m_time, mode, time_scheme)
    sol = FdSolution(x, out.get("american"), out.get("european"), k, env, p)
    if exercise == "both":
        try:
            sol.x_star = extract_boundary(sol, k)
            sol.lambda_hat = extract_lambda(sol, sol.x_star, k)
        except (NoExerciseRegion, DegenerateWindow):
            pass
    return sol


def extract_boundary(sol: FdSolution, k: float, tol: float | None = None) -> float:
    """Exercise boundary: the largest node where ``P - (K - e^x) <= tol``.

    The crossing of ``P - (K - e^x) - tol`` between that node and the next
    one is located by linear interpolation.  ``tol`` defaults to ``1e-8 K``.
    """
    if sol.american_prices is None:
        raise ValueError("boundary extraction needs an American solution")
    tol = 1e-8 * k if tol is None else tol
    gap = sol.american_prices - (k - np.exp(sol.x)) - tol
    below = np.nonzero((gap <= 0.0) & (sol.x < math.log(k)))[0]
    if below.size == 0:
        raise NoExerciseRegion("no node satisfies the exercise condition")
    i = int(below[-1])
    if i == 0:
        # the first node is pinned to the payoff by the boundary condition
        raise NoExerciseRegion("exercise boundary at or below the lower grid edge")
    x0 = float(sol.x[i])
    if i + 1 < len(sol.x) and gap[i + 1] > 0.0:
        g0, g1 = float(gap[i]), float(gap[i + 1])
        x0 += (sol.x[i + 1] - sol.x[i]) * (-g0) / (g1 - g0)
    return min(x0, math.log(k) - 1e-12)


def extract_lambda(sol: FdSolution, x_star: float, k: float, floor: float = 1e-9) -> float:
    """OLS slope of ln(P - p) over ``x* < x < x* + 2 (ln K - x*)``.

    Nodes whose premium is below ``floor * k`` carry only round-off of the
    two solves and are left out of the regression.
    """
    hi = x_star + 2.0 * (math.log(k) - x_star)
    window = (sol.x > x_star) & (sol.x < hi)
    prem = sol.premium
    usable = window & (prem > floor * k)
    if np.count_nonzero(usable) < 5:
        raise DegenerateWindow(
            f"{np.count_nonzero(usable)} nodes with a positive premium in the regression window"
        )
    slope = np.polyfit(sol.x[usable], np.log(prem[usable]), 1)[0]
    return float(slope)


def dump_solution(sol: FdSolution, path) -> None:
    """Write ``x, P, p, premium`` columns as comma-separated text."""
    cols = [sol.x]
    names = ["x"]
    for name, vals in (("american", sol.american_prices), ("european", sol.european_prices)):
        if vals is not None:
            cols.append(vals)
            names.append(name)
    if sol.american_prices is not None and sol.european_prices is not None:
        cols.append(sol.premium)
        names.append("premium")
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(names),
               comments="", fmt="%.17g")


def _march(op, env, k, x, payoff, m_time, mode, time_scheme):
    dt = env.T / m_time
    american = mode == "american"
    ex = np.exp(x)

    def lower(tau):
        if american:
            return k, 1.0
        return k * math.exp(-env.r * tau), math.exp(-env.q * tau)

    def boundary(v, tau):
        kk, ee = lower(tau)
        v[0] = kk - ee * ex[0]
        v[-1] = 0.0

    bands1, ab1 = op.banded(dt, 1.0)
    bands2, ab2 = op.banded(dt, 2.0 / 3.0)
    v = payoff.copy()
    v_prev = None
    j_prev = None
    for step in range(1, m_time + 1):
        tau = step * dt
        jv = op.jump(v, *lower(tau - dt))
        if time_scheme == "bdf2" and v_prev is not None:
            rhs = (4.0 * v - v_prev) / 3.0 + (2.0 / 3.0) * dt * (2.0 * jv - j_prev)
            bands, ab = bands2, ab2
        else:
            rhs = v + dt * jv
            bands, ab = bands1, ab1
        boundary(rhs, tau)
        try:
            new = linalg.solve_banded(bands, ab, rhs, check_finite=False)
        except (linalg.LinAlgError, ValueError) as exc:
            raise NumericalFailure(f"banded solve failed at step {step}: {exc}") from exc
        if american:
            new = np.maximum(new, payoff)
        v_prev, v, j_prev = v, new, jv
    if not np.all(np.isfinite(v)):
        raise NumericalFailure("non-finite values in the FD solution")
    return v
