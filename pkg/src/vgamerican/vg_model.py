"""Variance gamma model primitives.

The VG log-return ``X(t)`` is a Brownian motion with drift ``theta`` and
volatility ``sigma`` run on a gamma clock with unit mean rate and variance
rate ``nu``.  Its Levy density is a two-sided exponential damped by ``1/|x|``::

    k(x) = exp(-lambda_p x) / (nu x)      for x > 0
    k(x) = exp(-lambda_n |x|) / (nu |x|)  for x < 0

with ``lambda_p, lambda_n = sqrt(theta^2/sigma^4 + 2/(sigma^2 nu)) -/+ theta/sigma^2``.
Everything in this module is a pure function of its arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import DivergentIntegral, DomainError, InvalidParams

EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class VgParams:
    """VG parameters ``(sigma, nu, theta)``."""

    sigma: float
    nu: float
    theta: float

    def __post_init__(self) -> None:
        if not (self.sigma > 0 and self.nu > 0):
            raise InvalidParams(f"sigma and nu must be positive, got {self}")
        if not all(math.isfinite(v) for v in (self.sigma, self.nu, self.theta)):
            raise InvalidParams(f"non-finite VG parameter in {self}")
        if 1.0 - 0.5 * self.sigma**2 * self.nu - self.theta * self.nu <= 0.0:
            raise InvalidParams(
                f"1 - sigma^2 nu/2 - theta nu must be positive for a finite drift, got {self}"
            )

    @property
    def lambda_p(self) -> float:
        return lambda_pn(self)[0]

    @property
    def lambda_n(self) -> float:
        return lambda_pn(self)[1]

    @property
    def omega(self) -> float:
        return martingale_drift(self)

    @property
    def variance(self) -> float:
        """Variance of X(1): sigma^2 + nu theta^2."""
        return self.sigma**2 + self.nu * self.theta**2


@dataclass(frozen=True)
class MarketEnv:
    """Rate, dividend yield and maturity (all annualised)."""

    r: float
    q: float
    T: float

    def __post_init__(self) -> None:
        if self.r < 0 or self.q < 0:
            raise InvalidParams(f"r and q must be non-negative, got {self}")
        if not self.T > 0:
            raise InvalidParams(f"T must be positive, got {self}")


def lambda_pn(p: VgParams) -> tuple[float, float]:
    """Decay rates ``(lambda_p, lambda_n)`` of positive and negative jumps."""
    s2 = p.sigma**2
    root = math.sqrt(p.theta**2 / s2**2 + 2.0 / (s2 * p.nu))
    return root - p.theta / s2, root + p.theta / s2


def levy_density(x, p: VgParams):
    """Levy density k(x); raises DomainError at x = 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x == 0.0):
        raise DomainError("the VG Levy density is singular at x = 0")
    lp, ln = lambda_pn(p)
    ax = np.abs(x)
    out = np.where(x > 0, np.exp(-lp * ax), np.exp(-ln * ax)) / (p.nu * ax)
    return out[()] if out.ndim == 0 else out


def char_exponent(xi, p: VgParams):
    """phi(xi) with ln E[exp(i xi X(t))] = t phi(xi); accepts complex xi."""
    xi = np.asarray(xi, dtype=complex)
    out = -np.log(1.0 + 0.5 * p.sigma**2 * p.nu * xi**2 - 1j * p.theta * p.nu * xi) / p.nu
    return out[()] if out.ndim == 0 else out


def martingale_drift(p: VgParams) -> float:
    """omega = ln(1 - sigma^2 nu/2 - theta nu) / nu."""
    arg = 1.0 - 0.5 * p.sigma**2 * p.nu - p.theta * p.nu
    if arg <= 0:
        raise InvalidParams("log argument of the martingale drift is not positive")
    return math.log(arg) / p.nu


# ---------------------------------------------------------------------------
# special functions


def ein(z):
    """Entire exponential integral Ein(z) = int_0^z (1 - e^-t)/t dt, real z.

    Ein(z) = E1(z) + ln z + gamma for z > 0 and gamma + ln|z| - Ei(|z|) for
    z < 0; the power series is used near the origin where those cancel.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1.0
    if np.any(small):
        zs = z[small]
        term = zs.copy()
        acc = zs.copy()
        for k in range(2, 30):
            term = -term * zs / k
            acc = acc + term / k
        out[small] = acc
    pos = (~small) & (z > 0)
    out[pos] = special.exp1(z[pos]) + np.log(z[pos]) + EULER_GAMMA
    neg = (~small) & (z < 0)
    out[neg] = EULER_GAMMA + np.log(-z[neg]) - special.expi(-z[neg])
    return out[()] if out.ndim == 0 else out


def exp_tail(a, lam, nu: float):
    """int_a^inf exp(-lam u) / (nu u) du = E1(lam a) / nu, for a > 0, lam > 0."""
    return special.exp1(np.multiply(lam, a)) / nu


# ---------------------------------------------------------------------------
# truncated moments


def truncated_variance(eps: float, p: VgParams) -> float:
    """sigma^2(eps) = int_{|y|<=eps} y^2 k(y) dy, in closed form."""
    if not eps > 0:
        raise InvalidParams("truncation radius must be positive")
    v = 0.0
    for lam in lambda_pn(p):
        le = lam * eps
        # 1 - e^{-le}(1 + le); series below le ~ 1e-3 avoids cancellation
        if le < 1e-3:
            v += le**2 * (0.5 - le / 3.0 + le**2 / 8.0) / lam**2
        else:
            v += (-math.expm1(-le) - le * math.exp(-le)) / lam**2
    return v / p.nu


def tail_variance(eps: float, p: VgParams) -> float:
    """int_{|y|>eps} y^2 k(y) dy."""
    v = 0.0
    for lam in lambda_pn(p):
        le = lam * eps
        v += math.exp(-le) * (1.0 + le) / lam**2
    return v / p.nu


def truncated_drift(eps: float, p: VgParams) -> float:
    """omega(eps) = int_{|y|>eps} (1 - e^y) k(y) dy via exponential integrals."""
    if not eps > 0:
        raise InvalidParams("truncation radius must be positive")
    lp, ln = lambda_pn(p)
    if lp <= 1.0:
        raise DivergentIntegral(f"int e^y k(y) dy diverges for lambda_p = {lp:.4g} <= 1")
    pos = special.exp1(lp * eps) - special.exp1((lp - 1.0) * eps)
    neg = special.exp1(ln * eps) - special.exp1((ln + 1.0) * eps)
    return float(pos + neg) / p.nu


def truncated_variance_quad(eps: float, p: VgParams) -> float:
    """Adaptive-quadrature fallback for truncated_variance (y^2 k(y) = |y| e^{..}/nu)."""
    lp, ln = lambda_pn(p)
    f_pos = lambda y: y * math.exp(-lp * y) / p.nu
    f_neg = lambda y: y * math.exp(-ln * y) / p.nu
    a = integrate.quad(f_pos, 0.0, eps, epsabs=0, epsrel=1e-13)[0]
    b = integrate.quad(f_neg, 0.0, eps, epsabs=0, epsrel=1e-13)[0]
    return a + b


def truncated_drift_quad(eps: float, p: VgParams) -> float:
    """Adaptive-quadrature fallback for truncated_drift."""
    lp, ln = lambda_pn(p)
    if lp <= 1.0:
        raise DivergentIntegral(f"int e^y k(y) dy diverges for lambda_p = {lp:.4g} <= 1")
    f_pos = lambda y: -math.expm1(y) * math.exp(-lp * y) / (p.nu * y)
    f_neg = lambda u: -math.expm1(-u) * math.exp(-ln * u) / (p.nu * u)
    a = integrate.quad(f_pos, eps, np.inf, epsabs=0, epsrel=1e-12, limit=200)[0]
    b = integrate.quad(f_neg, eps, np.inf, epsabs=0, epsrel=1e-12, limit=200)[0]
    return a + b
