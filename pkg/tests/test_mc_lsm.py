import math

import numpy as np
import pytest

from vgamerican.errors import InvalidParams
from vgamerican.mc_lsm import lsm_price, mc_american_put, simulate
from vgamerican.vg_model import MarketEnv, VgParams, martingale_drift


@pytest.fixture(scope="module")
def terminal():
    env, p = MarketEnv(0.05, 0.01, 0.5), VgParams(0.3, 0.4, -0.2)
    batch = simulate(env, p, 100.0, 5, 100_000, seed=5)
    return env, p, batch.log_prices[:, -1] - math.log(100.0)


def _within(sample, target, k=3.0):
    return abs(sample.mean() - target) < k * sample.std(ddof=1) / math.sqrt(sample.size)


def test_log_return_moments(terminal):
    env, p, x = terminal
    assert _within(x, (env.r - env.q + martingale_drift(p)) * env.T + p.theta * env.T)
    dev2 = (x - x.mean()) ** 2
    assert _within(dev2, p.variance * env.T)


def test_martingale(terminal):
    env, _, x = terminal
    assert _within(np.exp(x) * math.exp(-(env.r - env.q) * env.T), 1.0)


def test_determinism_and_antithetics():
    env, p = MarketEnv(0.05, 0.01, 0.25), VgParams(0.2, 0.3, -0.1)
    a = simulate(env, p, 100.0, 10, 1000, seed=3)
    b = simulate(env, p, 100.0, 10, 1000, seed=3)
    assert np.array_equal(a.log_prices, b.log_prices)
    c = simulate(env, p, 100.0, 10, 1000, seed=3, antithetic=True)
    assert c.n_paths == 1000 and c.n_steps == 10
    with pytest.raises(InvalidParams):
        simulate(env, p, 100.0, 10, 999, antithetic=True)


def test_table_two_simulation_value():
    env, p = MarketEnv(0.05, 0.01, 1 / 12), VgParams(0.1, 0.6, -0.1)
    res = mc_american_put(2900.0, 2900.0, env, p, seed=2024)
    assert abs(res.price - 24.880) < 3 * res.stderr


def test_zero_strike_and_paired_bound():
    env, p = MarketEnv(0.05, 0.01, 0.25), VgParams(0.2, 0.3, -0.1)
    batch = simulate(env, p, 100.0, 50, 20_000, seed=9)
    assert lsm_price(batch, 0.0, env).price == 0.0
    res = lsm_price(batch, 105.0, env)
    price, se = res
    assert price >= res.european - se
