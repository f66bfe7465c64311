import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from vgamerican import _kernels
from vgamerican.errors import DomainError, InvalidParams
from vgamerican.vg_model import (
    MarketEnv,
    VgParams,
    char_exponent,
    ein,
    exp_tail,
    lambda_pn,
    levy_density,
    martingale_drift,
    tail_variance,
    truncated_drift,
    truncated_drift_quad,
    truncated_variance,
    truncated_variance_quad,
)

params = st.builds(
    VgParams,
    sigma=st.floats(0.05, 0.6),
    nu=st.floats(0.05, 0.9),
    theta=st.floats(-0.6, 0.2),
).filter(lambda p: lambda_pn(p)[0] > 1.5)


def test_symmetric_rates():
    lp, ln = lambda_pn(VgParams(0.2, 0.3, 0.0))
    assert lp == pytest.approx(math.sqrt(2 / 0.012), rel=1e-14)
    assert ln == pytest.approx(lp, rel=1e-14)


def test_rates_negative_skew():
    p = VgParams(0.1, 0.6, -0.5)
    lp, ln = lambda_pn(p)
    root = math.sqrt(0.5**2 / 0.1**4 + 2 / (0.01 * 0.6))
    assert lp == pytest.approx(root + 50.0)
    assert ln == pytest.approx(root - 50.0)
    assert ln > 0
    # the heavier tail is the negative one: k(-x) > k(x)
    assert levy_density(-0.1, p) > levy_density(0.1, p)


@given(params)
def test_rate_identities(p):
    lp, ln = lambda_pn(p)
    assert lp - ln == pytest.approx(-2 * p.theta / p.sigma**2, rel=1e-9, abs=1e-9)
    assert lp * ln == pytest.approx(2 / (p.sigma**2 * p.nu), rel=1e-9)


def test_density_plug_in():
    p = VgParams(0.2, 0.5, 0.0)
    lp = lambda_pn(p)[0]
    assert levy_density(1.0, p) == pytest.approx(math.exp(-lp) / 0.5, rel=1e-14)
    with pytest.raises(DomainError):
        levy_density(0.0, p)


@given(st.floats(0.01, 2.0))
def test_density_symmetry_without_skew(x):
    p = VgParams(0.25, 0.4, 0.0)
    assert levy_density(x, p) == pytest.approx(levy_density(-x, p), rel=1e-14)


def test_char_exponent_basic():
    p = VgParams(0.1, 0.6, -0.5)
    assert char_exponent(0.0, p) == 0
    for xi in (0.5, 1.0, 5.0):
        assert char_exponent(-xi, p) == pytest.approx(np.conj(char_exponent(xi, p)), rel=1e-14)
    # ln E[e^{X(1)}] = phi(-i) = -omega
    assert char_exponent(-1j, p).real == pytest.approx(-martingale_drift(p), rel=1e-12)


def test_char_exponent_vs_simulation():
    p, T = VgParams(0.3, 0.4, -0.2), 0.5
    rng = np.random.default_rng(7)
    g = rng.gamma(T / p.nu, p.nu, 100_000)
    x = p.theta * g + p.sigma * np.sqrt(g) * rng.standard_normal(g.size)
    emp = np.exp(1j * x)
    se = math.hypot(emp.real.std(), emp.imag.std()) / math.sqrt(x.size)
    assert abs(emp.mean() - np.exp(T * char_exponent(1.0, p))) < 3 * se


def test_martingale_drift_value():
    assert martingale_drift(VgParams(0.1, 0.6, -0.5)) == pytest.approx(math.log(1.297) / 0.6)
    p = VgParams(0.3, 0.4, -0.045)
    assert martingale_drift(p) == pytest.approx(0.0, abs=1e-15)


def test_invalid_params():
    for bad in ((0.0, 0.2, 0.0), (0.2, -1, 0.0), (0.2, 0.5, 3.0), (math.nan, 0.2, 0.0)):
        with pytest.raises(InvalidParams):
            VgParams(*bad)
    with pytest.raises(InvalidParams):
        MarketEnv(0.05, 0.01, 0.0)


@pytest.mark.parametrize("z", [-40.0, -11.0, -3.0, -0.5, 1e-6, 0.3, 1.9, 2.5, 8.0, 60.0])
def test_ein_against_quadrature(z):
    ref = integrate.quad(lambda t: -math.expm1(-t) / t if t else 1.0, 0, z, epsabs=0,
                         epsrel=1e-13, limit=200)[0]
    assert ein(z) == pytest.approx(ref, rel=1e-12)
    assert _kernels.ein(z) == pytest.approx(ref, rel=1e-12)


def test_exp_tail_against_quadrature():
    ref = integrate.quad(lambda u: math.exp(-3.0 * u) / (0.4 * u), 0.2, np.inf)[0]
    assert exp_tail(0.2, 3.0, 0.4) == pytest.approx(ref, rel=1e-10)


@given(params, st.floats(1e-3, 3.0))
@settings(max_examples=60)
def test_truncated_variance_splits_total(p, eps):
    total = truncated_variance(eps, p) + tail_variance(eps, p)
    assert total == pytest.approx(p.variance, rel=1e-12)


@given(params, st.floats(1e-3, 2.0), st.floats(1.01, 3.0))
@settings(max_examples=40)
def test_truncated_variance_monotone(p, eps, factor):
    lo, hi = truncated_variance(eps, p), truncated_variance(eps * factor, p)
    assert lo <= hi
    if tail_variance(eps, p) > 1e-10 * p.variance:
        assert lo < hi


def test_truncated_moments_vs_quadrature():
    p = VgParams(0.2, 0.3, -0.2)
    assert truncated_variance(0.65, p) == pytest.approx(truncated_variance_quad(0.65, p), rel=1e-10)
    p = VgParams(0.1, 0.6, -0.5)
    assert truncated_drift(0.65, p) == pytest.approx(truncated_drift_quad(0.65, p), rel=1e-10)


@given(params)
@settings(max_examples=40)
def test_truncated_drift_limits(p):
    assert truncated_drift(1e-9, p) == pytest.approx(martingale_drift(p), abs=1e-6)
    assert abs(truncated_drift(60.0, p)) < 1e-12
