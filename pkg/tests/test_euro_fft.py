import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from vgamerican import pide_fd
from vgamerican.errors import DampingError, FFTConfigError, OutOfGrid
from vgamerican.euro_fft import (
    FftConfig,
    build_curve,
    char_fn_log_price,
    euro_put,
    euro_put_dx,
)
from vgamerican.vg_model import MarketEnv, VgParams

from conftest import SWEEP


def lewis_call(s, k, env, p):
    """Call price from a single real-line integral of the characteristic function."""
    kappa = math.log(s / k)

    def integrand(u):
        z = u - 0.5j
        # characteristic function of ln(S_T/S)
        phi = char_fn_log_price(z, env, p)
        return (np.exp(1j * u * kappa) * phi).real / (u * u + 0.25)

    val = integrate.quad(integrand, 0, np.inf, limit=2000, epsabs=1e-13, epsrel=1e-12)[0]
    return s * math.exp(-env.q * env.T) - math.sqrt(s * k) * math.exp(-env.r * env.T) / math.pi * val


def test_char_fn_identities():
    env, p = MarketEnv(0.05, 0.01, 0.5), VgParams(0.3, 0.4, -0.2)
    assert char_fn_log_price(0.0, env, p) == pytest.approx(1.0)
    for u in (1.0, 5.0, 20.0):
        assert abs(char_fn_log_price(u, env, p)) <= 1.0
    assert char_fn_log_price(-1j, env, p, s0=3.0) == pytest.approx(3.0 * math.exp(0.04 * 0.5), rel=1e-12)


@pytest.mark.parametrize("T", [1 / 12, 0.25, 1.0])
@pytest.mark.parametrize("p", SWEEP)
def test_curve_against_lewis_integral(T, p):
    env = MarketEnv(0.05, 0.01, T)
    curve = build_curve(env, p)
    s = 2900.0
    for k in (2600.0, 2900.0, 3100.0):
        call = s * float(curve.call(math.log(k / s))[0])
        assert call == pytest.approx(lewis_call(s, k, env, p), abs=5e-4)


def test_parity_and_convexity_on_grid():
    env, p = MarketEnv(0.05, 0.01, 0.25), VgParams(0.4, 0.6, -0.5)
    c = build_curve(env, p)
    m = c.log_strike_grid
    parity = c.call_prices - c.put_prices - (math.exp(-env.q * env.T) - np.exp(m - env.r * env.T))
    live = (c.put_prices > 0) & (c.call_prices > 0)
    assert np.max(np.abs(parity[live])) < 1e-14
    # convex in the strike K = e^m: second divided differences in K are >= 0
    kk = np.exp(m)
    slope = np.diff(c.put_prices) / np.diff(kk)
    assert np.all(np.diff(slope) > -1e-9)
    assert np.all(np.diff(c.put_prices) >= -1e-12)


def test_deep_otm_put_and_call_tail():
    env, p = MarketEnv(0.05, 0.01, 1 / 12), VgParams(0.1, 0.1, -0.5)
    c = build_curve(env, p)
    assert float(c.put(-1.5)[0]) < 1e-4
    assert float(c.call_tail(c.hi + 1.0)[0]) == 0.0
    with pytest.raises(OutOfGrid):
        c.put(c.hi + 0.5)


def test_atm_matches_fd_european():
    env, p = MarketEnv(0.05, 0.01, 1 / 12), VgParams(0.1, 0.1, -0.5)
    sol = pide_fd.solve(env, p, 2900.0, exercise="european")
    assert euro_put(2900.0, 2900.0, env, p) == pytest.approx(sol.price_at(2900.0, "european"), abs=0.05)


@given(st.floats(500, 5000), st.floats(0.7, 1.4), st.floats(0.1, 10.0))
@settings(max_examples=50, deadline=None)
def test_homogeneity(s, moneyness, a):
    env, p = MarketEnv(0.05, 0.01, 0.25), VgParams(0.2, 0.3, -0.2)
    k = s * moneyness
    assert euro_put(a * s, a * k, env, p) == pytest.approx(a * euro_put(s, k, env, p), rel=1e-10, abs=1e-12)


def test_put_bounds_table_one_case():
    env, p = MarketEnv(0.01, 0.10, 0.5), VgParams(0.1, 0.6, -0.5)
    v = euro_put(2900.0, 3000.0, env, p)
    lower = 3000 * math.exp(-0.005) - 2900 * math.exp(-0.05)
    assert lower <= v <= 351.540
    assert euro_put(2900.0, 0.0, env, p) == 0.0
    assert euro_put(2900.0, 1e-9, env, p) == 0.0
    with pytest.raises(OutOfGrid):
        euro_put(2900.0, 30.0, MarketEnv(0.05, 0.01, 1.0), VgParams(0.4, 0.6, -0.5))


def test_delta_against_finite_differences():
    env, p = MarketEnv(0.03, 0.0, 0.5), VgParams(0.2, 0.3, -0.2)
    rng = np.random.default_rng(3)
    for _ in range(20):
        k = rng.uniform(800, 1200)
        x = math.log(k) + rng.uniform(-0.5, 0.5)
        h = 1e-3
        vals = [euro_put(math.exp(x + j * h), k, env, p) for j in (-2, -1, 1, 2)]
        fd = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
        assert float(euro_put_dx(x, k, env, p)) == pytest.approx(fd, abs=1e-4 * k)
    # put delta in [-e^{-qT}, 0]; with q = 0 deep in the money it tends to -1
    for x in np.log(1000.0) + np.array([-1.2, -0.3, 0.0, 0.4, 1.5]):
        delta = float(euro_put_dx(x, 1000.0, env, p)) / math.exp(x)
        assert -math.exp(-env.q * env.T) - 1e-9 <= delta <= 1e-9
    deep = float(euro_put_dx(math.log(1000.0) - 1.5, 1000.0, env, p)) / math.exp(math.log(1000.0) - 1.5)
    assert deep == pytest.approx(-1.0, abs=1e-3)
    assert abs(float(euro_put_dx(math.log(1000.0) + 2.0, 1000.0, env, p))) < 1e-6 * 1000


def test_config_validation():
    with pytest.raises(FFTConfigError):
        FftConfig(n=1000)
    with pytest.raises(FFTConfigError):
        FftConfig(dk=1e-2)
    with pytest.raises(FFTConfigError):
        FftConfig(n=2**10, dk=1e-3, span=4.0)
    with pytest.raises(DampingError):
        build_curve(MarketEnv(0.05, 0.0, 1.0), VgParams(0.4, 0.6, -0.5), FftConfig(alpha=30.0))
