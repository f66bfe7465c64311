"""European VG puts from the Carr-Madan FFT.

A :class:`EuroCurve` holds unit-spot call and put prices on a uniform
log-strike grid ``m = ln(K/S)``.  Prices at any ``(S, K)`` follow from the
homogeneity ``p(aS, aK) = a p(S, K)``, so one FFT serves every spot and
strike of a parameter set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from . import _kernels
from .errors import DampingError, FFTConfigError, InvalidParams, OutOfGrid
from .vg_model import MarketEnv, VgParams, char_exponent, martingale_drift


#: unit-spot call value treated as zero beyond the top of a curve
CALL_TAIL_TOL = 1e-10


@dataclass(frozen=True)
class FftConfig:
    """Carr-Madan grid.

    ``dk`` is the log-strike spacing; the frequency step follows from
    ``eta = 2 pi / (n dk)``.  Log-strikes with ``|m| <= span`` are kept; the
    top is extended when the call there is still above ``CALL_TAIL_TOL``.
    """

    n: int = 2**14
    dk: float = 1e-3
    alpha: float = 1.5
    span: float = 4.0

    def __post_init__(self) -> None:
        if self.n & (self.n - 1) or self.n < 16:
            raise FFTConfigError(f"n must be a power of two >= 16, got {self.n}")
        if self.dk > 5e-3:
            raise FFTConfigError(f"log-strike spacing {self.dk} coarser than 5e-3")
        if self.n * self.dk < 2 * self.span + 1.0 or self.span < 1.5:
            raise FFTConfigError("grid does not cover the requested log-strike span")


def char_fn_log_price(u, env: MarketEnv, p: VgParams, s0: float = 1.0):
    """E[exp(i u ln S(T))] under the risk-neutral VG dynamics (complex u allowed)."""
    u = np.asarray(u, dtype=complex)
    drift = math.log(s0) + (env.r - env.q + martingale_drift(p)) * env.T
    out = np.exp(1j * u * drift + env.T * char_exponent(u, p))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class EuroCurve:
    """Unit-spot European prices on a uniform log-strike grid."""

    log_strike_grid: np.ndarray
    call_prices: np.ndarray
    put_prices: np.ndarray
    env: MarketEnv
    params: VgParams
    _m0: float = field(repr=False, default=0.0)
    _dm: float = field(repr=False, default=0.0)

    @property
    def lo(self) -> float:
        return float(self.log_strike_grid[1])

    @property
    def hi(self) -> float:
        return float(self.log_strike_grid[-3])

    def _weights(self, m):
        """Cubic Lagrange stencil (index, weights, derivative weights) at log-strikes m."""
        t = (m - self._m0) / self._dm
        i = np.floor(t).astype(int)
        f = t - i
        fm1, f0, f1, f2 = f + 1.0, f, f - 1.0, f - 2.0
        w = np.stack(
            [-f0 * f1 * f2 / 6.0, fm1 * f1 * f2 / 2.0, -fm1 * f0 * f2 / 2.0, fm1 * f0 * f1 / 6.0]
        )
        dw = np.stack(
            [
                -(f1 * f2 + f0 * f2 + f0 * f1) / 6.0,
                (f1 * f2 + fm1 * f2 + fm1 * f1) / 2.0,
                -(f0 * f2 + fm1 * f2 + fm1 * f0) / 2.0,
                (f0 * f1 + fm1 * f1 + fm1 * f0) / 6.0,
            ]
        ) / self._dm
        idx = i[None, :] + np.arange(-1, 3)[:, None]
        return idx, w, dw

    def _check(self, m) -> None:
        if np.any(m < self.lo) or np.any(m > self.hi):
            raise OutOfGrid(
                f"log-moneyness outside cached curve [{self.lo:.3f}, {self.hi:.3f}]"
            )

    def put(self, m, deriv: bool = False):
        """Unit-spot put at log-strike m (and d/dm if ``deriv``)."""
        return self._interp(self.put_prices, m, deriv)

    def call(self, m, deriv: bool = False):
        """Unit-spot call at log-strike m (and d/dm if ``deriv``)."""
        return self._interp(self.call_prices, m, deriv)

    def _interp(self, table, m, deriv):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        self._check(m)
        idx, w, dw = self._weights(m)
        vals = table[idx]
        v = np.sum(w * vals, axis=0)
        if deriv:
            return v, np.sum(dw * vals, axis=0)
        return v

    def call_tail(self, m):
        """Unit-spot call, returning 0 above the grid.

        Only valid because the grid top is checked to be far out of the
        money when the curve is built (see :func:`build_curve`).
        """
        m = np.atleast_1d(np.asarray(m, dtype=float))
        out = np.zeros_like(m)
        inside = m <= self.hi
        if np.any(m[inside] < self.lo):
            raise OutOfGrid("call_tail queried below the cached curve")
        if np.any(inside):
            out[inside] = self._interp(self.call_prices, m[inside], False)
        return out


def build_curve(env: MarketEnv, p: VgParams, grid: FftConfig | None = None) -> EuroCurve:
    """Price unit-spot calls and puts over log-strikes with the Carr-Madan FFT."""
    grid = grid or FftConfig()
    a = grid.alpha
    # E[S^{1+a}] < inf  <=>  the log in the VG exponent stays positive at u = -(1+a)i
    arg = 1.0 - 0.5 * p.sigma**2 * p.nu * (1 + a) ** 2 - p.theta * p.nu * (1 + a)
    if not a > 0 or arg <= 0:
        raise DampingError(f"damping alpha={a} violates the moment condition for {p}")
    n, dk = grid.n, grid.dk
    eta = 2.0 * math.pi / (n * dk)
    b = 0.5 * n * dk
    v = np.arange(n) * eta
    # |psi(v)| <= C |z(v)|^{-T/nu} / v^2; frequencies where the bound is below
    # 1e-17 of the leading term contribute nothing in double precision
    s2n = 0.5 * p.sigma**2 * p.nu
    decay = -(env.T / p.nu) * 0.5 * np.log1p(s2n * v * v) - 2.0 * np.log1p(v)
    live = np.nonzero(decay > decay[0] - 39.0)[0]
    m = int(live[-1]) + 1 if live.size else n
    drift = (env.r - env.q + martingale_drift(p)) * env.T
    psi = _kernels.fft_integrand(n, m, eta, a, s2n, p.theta * p.nu, env.T / p.nu, drift, b,
                                 env.r * env.T)
    ks = -b + np.arange(n) * dk
    all_calls = (np.exp(-a * ks) / math.pi) * sfft.fft(psi).real
    lo = int(np.searchsorted(ks, -grid.span - 3 * dk))
    top = int(np.searchsorted(ks, grid.span + 3 * dk, side="right"))
    # heavy right tails: extend the top until the call is negligible, staying
    # half a unit inside the FFT range where wrap-around is harmless
    limit = int(np.searchsorted(ks, b - 0.5))
    while top < limit and all_calls[top - 1] > CALL_TAIL_TOL:
        top += 1
    ks = ks[lo:top]
    calls = np.maximum(all_calls[lo:top], 0.0)
    puts = calls - math.exp(-env.q * env.T) + np.exp(ks - env.r * env.T)
    puts = np.maximum(puts, 0.0)
    if calls[-1] > CALL_TAIL_TOL:
        raise FFTConfigError(f"call at log-strike {ks[-1]:.2f} is {calls[-1]:.2e}; widen the grid")
    return EuroCurve(ks, calls, puts, env, p, _m0=float(ks[0]), _dm=dk)


@lru_cache(maxsize=64)
def cached_curve(env: MarketEnv, p: VgParams, grid: FftConfig | None = None) -> EuroCurve:
    """Memoised :func:`build_curve`; curves are immutable so sharing is safe."""
    return build_curve(env, p, grid)


def euro_put(s, k, env: MarketEnv, p: VgParams, curve: EuroCurve | None = None):
    """European put p(s, 0; k) = s * P1(ln(k/s))."""
    curve = curve or cached_curve(env, p)
    s = np.asarray(s, dtype=float)
    k = np.asarray(k, dtype=float)
    if np.any(s <= 0) or np.any(k < 0):
        raise InvalidParams("spot must be positive and strike non-negative")
    s_b, k_b = np.broadcast_arrays(s, k)
    out = np.zeros(s_b.shape)
    live = k_b > 0
    if np.any(live):
        m = np.full(s_b.shape, -np.inf)
        m[live] = np.log(k_b[live] / s_b[live])
        # convexity and p(0) = 0 give p(m) <= e^{m - lo} p(lo) below the grid;
        # such strikes are priced at zero only when that bound is negligible
        tiny = live & (m < curve.lo)
        if np.any(tiny):
            bound = s_b[tiny] * np.exp(m[tiny] - curve.lo) * float(curve.put(curve.lo)[0])
            if np.max(bound) > 1e-8:
                raise OutOfGrid(f"strike far below the cached curve (log-moneyness {m[tiny].min():.2f})")
            live &= ~tiny
        if np.any(live):
            out[live] = s_b[live] * curve.put(m[live])
    return out[()] if out.ndim == 0 else out


def euro_put_dx(x, k, env: MarketEnv, p: VgParams, curve: EuroCurve | None = None):
    """d/dx of p(e^x, 0; k) = e^x (P1(m) - P1'(m)) with m = ln k - x."""
    curve = curve or cached_curve(env, p)
    x = np.asarray(x, dtype=float)
    s = np.exp(x)
    m = np.log(np.asarray(k, dtype=float)) - x
    val, dval = curve.put(np.atleast_1d(m), deriv=True)
    out = np.atleast_1d(s) * (val - dval)
    return out.reshape(np.shape(m))[()] if np.ndim(m) == 0 else out.reshape(np.shape(m))
