"""VG path simulation and Longstaff-Schwartz valuation of American puts.

Paths are generated from the gamma time change: on each step a gamma clock
increment ``G ~ Gamma(dt/nu, nu)`` drives a Brownian increment with drift
``theta G`` and variance ``sigma^2 G``.  numpy's gamma sampler is exact
(rejection based) for every shape, including the small ``dt/nu`` typical
here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParams
from .vg_model import MarketEnv, VgParams, martingale_drift


@dataclass(frozen=True)
class PathBatch:
    """Simulated log-prices; column 0 is ln S(0)."""

    log_prices: np.ndarray
    dt: float
    seed: int | None
    antithetic: bool = False

    @property
    def n_paths(self) -> int:
        return self.log_prices.shape[0]

    @property
    def n_steps(self) -> int:
        return self.log_prices.shape[1] - 1


@dataclass
class LsmResult:
    price: float
    stderr: float
    european: float
    european_stderr: float
    steps_without_itm: list[int] = field(default_factory=list)

    def __iter__(self):
        # allows ``price, se = lsm_price(...)``
        yield self.price
        yield self.stderr


def simulate(env: MarketEnv, p: VgParams, s0: float, n_steps: int, n_paths: int,
             seed: int | None = None, antithetic: bool = False) -> PathBatch:
    """Risk-neutral VG log-price paths on a uniform time grid."""
    if n_steps < 1 or n_paths < 2:
        raise InvalidParams("need at least one step and two paths")
    if not s0 > 0:
        raise InvalidParams("spot must be positive")
    if antithetic and n_paths % 2:
        raise InvalidParams("antithetic sampling needs an even path count")
    rng = np.random.default_rng(seed)
    dt = env.T / n_steps
    drift = (env.r - env.q + martingale_drift(p)) * dt
    half = n_paths // 2 if antithetic else n_paths
    out = np.empty((n_paths, n_steps + 1))
    out[:, 0] = math.log(s0)
    for j in range(n_steps):
        g = rng.gamma(dt / p.nu, p.nu, size=half)
        z = rng.standard_normal(half)
        if antithetic:
            g = np.concatenate([g, g])
            z = np.concatenate([z, -z])
        out[:, j + 1] = out[:, j] + drift + p.theta * g + p.sigma * np.sqrt(g) * z
    return PathBatch(out, dt, seed, antithetic)


def _basis(s: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(s), s, s * s, s * s * s])


def lsm_price(batch: PathBatch, k: float, env: MarketEnv) -> LsmResult:
    """Longstaff-Schwartz value of the American put with cubic regression on S/K.

    The standard error is the sample deviation of the discounted path
    cash-flows over sqrt(n) (pairs are averaged first with antithetics).
    """
    if not k >= 0:
        raise InvalidParams("strike must be non-negative")
    disc = math.exp(-env.r * batch.dt)
    spots = np.exp(batch.log_prices)
    n = batch.n_steps
    cash = np.maximum(k - spots[:, n], 0.0)
    euro = cash * math.exp(-env.r * env.T)
    no_itm = []
    for j in range(n - 1, 0, -1):
        cash *= disc
        payoff = k - spots[:, j]
        itm = payoff > 0.0
        if np.count_nonzero(itm) < 4:
            no_itm.append(j)
            continue
        s = spots[itm, j] / k
        coef, *_ = np.linalg.lstsq(_basis(s), cash[itm], rcond=None)
        cont = _basis(s) @ coef
        ex = payoff[itm] > cont
        idx = np.nonzero(itm)[0][ex]
        cash[idx] = payoff[idx]
    cash *= disc
    price_paths = cash
    intrinsic = max(k - float(spots[0, 0]), 0.0)
    if batch.antithetic:
        m = batch.n_paths // 2
        price_paths = 0.5 * (cash[:m] + cash[m:])
        euro = 0.5 * (euro[:m] + euro[m:])
    cont_value = float(price_paths.mean())
    se = float(price_paths.std(ddof=1) / math.sqrt(len(price_paths)))
    euro_se = float(euro.std(ddof=1) / math.sqrt(len(euro)))
    return LsmResult(max(cont_value, intrinsic), se, float(euro.mean()), euro_se, no_itm)


def mc_american_put(s0: float, k: float, env: MarketEnv, p: VgParams, n_steps: int = 250,
                    n_paths: int = 100_000, seed: int | None = 0,
                    antithetic: bool = False) -> LsmResult:
    """Simulate and value in one call (250 steps and 1e5 paths by default)."""
    batch = simulate(env, p, s0, n_steps, n_paths, seed, antithetic)
    return lsm_price(batch, k, env)
