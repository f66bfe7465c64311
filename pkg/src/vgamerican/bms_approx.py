"""Effective Black-Merton-Scholes transfer of the early-exercise premium.

Small VG jumps ``|y| <= eps`` behave like a diffusion with variance rate
``sigma^2(eps)`` and the large ones mostly shift the drift by ``omega(eps)``.
The early-exercise premium of the lognormal model with volatility
``sqrt(sigma^2(eps))`` and dividend yield ``q - omega(eps)`` is added to the
VG European price.

Two lognormal American engines are provided: the Ju-Zhong correction of
the quadratic approximation (``fast_approx``, default), its uncorrected
Barone-Adesi-Whaley special case (``baw``), and a CRR binomial tree
(``tree``) used as the oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import ndtr

from .errors import InvalidParams
from .euro_fft import euro_put
from .vg_model import MarketEnv, VgParams, truncated_drift, truncated_variance

EPS_DEFAULT = 0.65
_SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BmsEnv:
    """Lognormal model matched to the VG small-jump part."""

    sigma_eff: float
    q_eff: float
    r: float
    T: float

    def __post_init__(self) -> None:
        if not self.sigma_eff > 0:
            raise InvalidParams("effective volatility must be positive")

    @property
    def drift(self) -> float:
        """Log-price drift r - q_eff - sigma_eff^2/2."""
        return self.r - self.q_eff - 0.5 * self.sigma_eff**2


def effective_env(env: MarketEnv, p: VgParams, eps: float = EPS_DEFAULT) -> BmsEnv:
    """sigma_eff = sqrt(sigma^2(eps)), q_eff = q - omega(eps)."""
    return BmsEnv(math.sqrt(truncated_variance(eps, p)), env.q - truncated_drift(eps, p),
                  env.r, env.T)


def _check(s, k, sigma, T):
    if not (sigma > 0 and T > 0):
        raise InvalidParams("sigma and T must be positive")
    if np.any(np.asarray(s) <= 0) or np.any(np.asarray(k) < 0):
        raise InvalidParams("spot must be positive and strike non-negative")


def _d1d2(s, k, r, q, sigma, T):
    vol = sigma * math.sqrt(T)
    d1 = (np.log(s / k) + (r - q + 0.5 * sigma * sigma) * T) / vol
    return d1, d1 - vol


def bms_put(s, k, r, q, sigma, T):
    """European put under geometric Brownian motion."""
    _check(s, k, sigma, T)
    s = np.asarray(s, dtype=float)
    k = np.asarray(k, dtype=float)
    fwd = k * math.exp(-r * T) - s * math.exp(-q * T)
    if sigma * math.sqrt(T) < 1e-12:
        out = np.maximum(fwd, 0.0)
    else:
        with np.errstate(divide="ignore"):
            d1, d2 = _d1d2(s, np.maximum(k, 1e-300), r, q, sigma, T)
        out = k * math.exp(-r * T) * ndtr(-d2) - s * math.exp(-q * T) * ndtr(-d1)
        out = np.where(k > 0, np.maximum(out, np.maximum(fwd, 0.0)), 0.0)
    return out[()] if out.ndim == 0 else out


def _put_theta_T(s, k, r, q, sigma, T):
    """d/dT of the European put at fixed spot."""
    d1, d2 = _d1d2(s, k, r, q, sigma, T)
    pdf = math.exp(-0.5 * d1 * d1) / _SQRT2PI
    return (s * math.exp(-q * T) * pdf * sigma / (2.0 * math.sqrt(T))
            + q * s * math.exp(-q * T) * ndtr(-d1) - r * k * math.exp(-r * T) * ndtr(-d2))


def _quadratic_boundary(k, r, q, sigma, T):
    """Critical price S* and exponent lambda(h) of the quadratic approximation."""
    h = -math.expm1(-r * T)
    alpha = 2.0 * r / sigma**2
    beta = 2.0 * (r - q) / sigma**2
    root = math.sqrt((beta - 1.0) ** 2 + 4.0 * alpha / h)
    lam = 0.5 * (-(beta - 1.0) - root)
    eq = math.exp(-q * T)

    def smooth_paste(s_star):
        d1, _ = _d1d2(s_star, k, r, q, sigma, T)
        pe = float(bms_put(s_star, k, r, q, sigma, T))
        return -1.0 + eq * ndtr(-d1) - lam * (k - s_star - pe) / s_star

    lo, hi = 1e-10 * k, k * (1.0 - 1e-12)
    if smooth_paste(hi) >= 0.0:
        return hi, lam, h, alpha, beta, root
    s_star = optimize.brentq(smooth_paste, lo, hi, xtol=1e-12 * k, rtol=1e-14, maxiter=200)
    return s_star, lam, h, alpha, beta, root


def bms_american_put(s, k, r, q, sigma, T, engine: str = "fast_approx", steps: int = 2000):
    """American put under geometric Brownian motion.

    ``engine`` is ``"fast_approx"`` (Ju-Zhong), ``"baw"`` or ``"tree"``.
    """
    _check(s, k, sigma, T)
    s = float(s)
    k = float(k)
    if k == 0.0:
        return 0.0
    if engine == "tree":
        return binomial_american_put(s, k, r, q, sigma, T, steps)
    if engine not in ("fast_approx", "baw"):
        raise InvalidParams(f"unknown engine {engine!r}")
    euro = float(bms_put(s, k, r, q, sigma, T))
    if r < 1e-10:
        # with no interest the put is never exercised early
        return max(euro, max(k - s, 0.0))
    s_star, lam, h, alpha, beta, root = _quadratic_boundary(k, r, q, sigma, T)
    if s <= s_star:
        return k - s
    pe_star = float(bms_put(s_star, k, r, q, sigma, T))
    hA = k - s_star - pe_star
    if engine == "baw" or hA <= 0.0:
        return max(euro + hA * (s / s_star) ** lam, k - s)
    # Ju-Zhong second-order correction
    dlam = alpha / (h * h * root)
    den = 2.0 * lam + beta - 1.0
    dVdh = _put_theta_T(s_star, k, r, q, sigma, T) * math.exp(r * T) / r
    b = (1.0 - h) * alpha * dlam / (2.0 * den)
    c = -(1.0 - h) * alpha / den * (dVdh / hA + 1.0 / h + dlam / den)
    ls = math.log(s / s_star)
    chi = b * ls * ls + c * ls
    return max(euro + hA * (s / s_star) ** lam / (1.0 - chi), k - s)


def binomial_american_put(s, k, r, q, sigma, T, steps: int = 2000) -> float:
    """Cox-Ross-Rubinstein tree with early exercise at every node."""
    if steps < 1:
        raise InvalidParams("tree needs at least one step")
    dt = T / steps
    u = math.exp(sigma * math.sqrt(dt))
    d = 1.0 / u
    pu = (math.exp((r - q) * dt) - d) / (u - d)
    if not 0.0 < pu < 1.0:
        raise InvalidParams("tree probabilities out of range; increase steps")
    disc = math.exp(-r * dt)
    j = np.arange(steps + 1)
    spots = s * u ** (2.0 * j - steps)
    v = np.maximum(k - spots, 0.0)
    for n in range(steps, 0, -1):
        spots = spots[1:] * d
        v = disc * (pu * v[1:] + (1.0 - pu) * v[:-1])
        np.maximum(v, k - spots, out=v)
    return float(v[0])


def simple_vg_american(s, k, env: MarketEnv, p: VgParams, eps: float = EPS_DEFAULT,
                       engine: str = "fast_approx", curve=None) -> float:
    """VG European price plus the premium of the matched lognormal model."""
    benv = effective_env(env, p, eps)
    prem = (bms_american_put(s, k, env.r, benv.q_eff, benv.sigma_eff, env.T, engine)
            - float(bms_put(s, k, env.r, benv.q_eff, benv.sigma_eff, env.T)))
    return float(euro_put(s, k, env, p, curve)) + max(prem, 0.0)
