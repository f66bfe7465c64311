import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgamerican import pide_fd
from vgamerican.errors import BoundaryInfeasible, DomainError
from vgamerican.euro_fft import build_curve, euro_put
from vgamerican.quad_core import (
    LAMBDA_BOX,
    XSTAR_GAP_BOX,
    CorrectionVector,
    OideProblem,
    PremiumFit,
    collocation_points,
    oide_coefficient,
)
from vgamerican.vg_model import MarketEnv, VgParams

from _oracle import brute_g

ENV, P, K = MarketEnv(0.05, 0.01, 1 / 12), VgParams(0.1, 0.1, -0.5), 2800.0


@pytest.fixture(scope="module")
def fd_case():
    sol = pide_fd.solve(ENV, P, K, exercise="both")
    pr = OideProblem(K, ENV, P, curve=build_curve(ENV, P))
    return sol, pr, pr.fit(sol.lambda_hat, sol.x_star)


def test_collocation_points():
    pts = collocation_points(0.0, math.exp(3.0))
    assert np.allclose(pts, np.arange(7.0), atol=1e-14)
    assert pts[3] == pytest.approx(3.0)
    c = 0.7
    assert np.allclose(collocation_points(0.2 + c, 50.0 * math.exp(c)), collocation_points(0.2, 50.0) + c)
    with pytest.raises(DomainError):
        collocation_points(math.log(50.0), 50.0)


def test_rate_coefficient_is_continuous_at_zero():
    vals = [oide_coefficient(MarketEnv(r, 0.0, 0.5)) for r in (0.0, 5e-9, 2e-8, 1e-6)]
    assert vals[0] == pytest.approx(2.0)
    assert np.allclose(vals, vals[0], rtol=1e-6)


def test_premium_shape(fd_case):
    _, pr, fit = fd_case
    assert pr.premium_w(fit.x_star, fit) == pytest.approx(
        K - math.exp(fit.x_star) - float(euro_put(math.exp(fit.x_star), K, ENV, P)), rel=1e-10)
    assert pr.premium_w(fit.x_star + 10.0, fit) < 1e-12
    assert pr.price(math.exp(fit.x_star), fit) == pytest.approx(K - math.exp(fit.x_star), rel=1e-12)
    assert pr.price(K * 50, fit) < 1e-9


@pytest.mark.xfail(strict=True, reason="the FD premium falls faster than one exponential just above "
                   "the boundary, so a single (lam, b) pair pinned at x* cannot track it to 1%")
def test_premium_against_fd(fd_case):
    sol, pr, fit = fd_case
    lk = math.log(K)
    window = (sol.x > fit.x_star) & (sol.x < 2 * lk - fit.x_star)
    err = np.abs(pr.premium_w(sol.x[window], fit) - sol.premium[window])
    scale = float(np.interp(lk, sol.x, sol.premium))
    assert err.max() < 0.01 * scale


def test_b_from_monotone_and_infeasible():
    pr = OideProblem(K, ENV, P)
    xs = math.log(K) - np.linspace(0.05, 0.5, 10)
    bs = [pr.b_from(x) for x in xs]
    assert np.all(np.diff(bs) > 0)
    with pytest.raises(BoundaryInfeasible):
        pr.b_from(math.log(K))


def test_residual_against_monolithic_quadrature():
    rng = np.random.default_rng(1)
    cases = [(ENV, P, K), (MarketEnv(0.05, 0.01, 0.25), VgParams(0.4, 0.6, -0.5), 2900.0),
             (MarketEnv(0.1, 0.01, 1.0), VgParams(0.2, 0.3, -0.3), 1000.0)]
    n_checked = 0
    for env, p, k in cases:
        pr = OideProblem(k, env, p)
        while n_checked < 10 and n_checked < 4 * (cases.index((env, p, k)) + 1):
            lam, xs = -rng.uniform(1, 30), math.log(k) - rng.uniform(0.02, 0.5)
            try:
                fit = pr.fit(lam, xs)
            except BoundaryInfeasible:
                continue
            x = xs + rng.uniform(0, 2) * (math.log(k) - xs)
            assert pr.g_eval(x, fit) == pytest.approx(brute_g(pr, x, fit), abs=1e-7 * k)
            n_checked += 1
    assert n_checked == 10


def test_flat_premium_far_from_boundary():
    pr = OideProblem(K, ENV, P)
    fit = pr.fit(-1e-9, math.log(K) - 1.0)
    w = math.exp(fit.b)
    assert pr.g_eval(fit.x_star + 8.0, fit) == pytest.approx(-pr.rho * w, rel=1e-6)


def test_vector_matches_pointwise(fd_case):
    _, pr, fit = fd_case
    assert np.allclose(pr.g_vector(fit), pr.g_eval(collocation_points(fit.x_star, K), fit),
                       rtol=1e-12, atol=1e-12 * K)


@pytest.mark.parametrize("a", [0.37, 2.0, 11.0])
def test_strike_scaling_of_residual(fd_case, a):
    _, pr, fit = fd_case
    big = OideProblem(a * K, ENV, P, curve=pr.curve)
    fit_a = big.fit(fit.lam, fit.x_star + math.log(a))
    assert fit_a.b == pytest.approx(fit.b + math.log(a), abs=1e-12)
    assert np.allclose(big.g_vector(fit_a), a * pr.g_vector(fit), rtol=1e-9, atol=0)


@pytest.mark.xfail(strict=True, reason="at the FD optimum the residual is of the same order as "
                   "the discount term r w/(1-e^{-rT}) on this short-dated case, not 5% of it")
def test_residual_small_at_fd_optimum(fd_case):
    _, pr, fit = fd_case
    xs = collocation_points(fit.x_star, K)
    ratio = np.abs(pr.g_vector(fit)) / (pr.rho * pr.premium_w(xs, fit))
    assert ratio.max() <= 0.05


def test_loss_identities(fd_case):
    _, pr, fit = fd_case
    g = pr.g_vector(fit)
    assert pr.loss(fit, CorrectionVector(g, K)) == 0.0
    assert pr.loss(fit, CorrectionVector(np.zeros(7), K)) == pytest.approx(float(np.sum(g**2)))
    assert pr.loss(fit, CorrectionVector(g * 0.5, K * 0.5)) == 0.0


@given(st.floats(LAMBDA_BOX[0], LAMBDA_BOX[1]), st.floats(*XSTAR_GAP_BOX))
@settings(max_examples=80, deadline=None)
def test_loss_finite_in_box(lam, gap):
    pr = _box_problem()
    try:
        fit = pr.fit(lam, math.log(K) - gap)
    except BoundaryInfeasible:
        return
    assert math.isfinite(pr.loss(fit, CorrectionVector(np.zeros(7), K)))


_BOX = {}


def _box_problem():
    if "pr" not in _BOX:
        _BOX["pr"] = OideProblem(K, ENV, P)
    return _BOX["pr"]


@pytest.mark.parametrize("method", ["profile", "simplex"])
def test_solve_fixed_point_and_recovery(fd_case, method):
    _, pr, fit = fd_case
    targets = CorrectionVector(pr.g_vector(fit), K)
    same, loss0, _ = pr.solve_fit(targets, fit, method=method)
    assert loss0 == 0.0 and same.lam == fit.lam and same.x_star == fit.x_star
    init = PremiumFit(fit.lam + 0.5, fit.x_star + 0.02, math.nan)
    got, _, _ = pr.solve_fit(targets, init, method=method)
    assert abs(got.lam - fit.lam) < 1e-3
    assert abs(got.x_star - fit.x_star) < 1e-4


@pytest.mark.parametrize("env, p, k", [
    (MarketEnv(0.05, 0.01, 0.25), VgParams(0.4, 0.6, -0.5), 2900.0),
    (MarketEnv(0.1, 0.01, 1.0), VgParams(0.2, 0.3, -0.3), 1000.0),
    (MarketEnv(0.01, 0.1, 0.5), VgParams(0.1, 0.6, -0.5), 3000.0),
])
def test_recovery_other_regimes(env, p, k):
    sol = pide_fd.solve(env, p, k, exercise="both")
    pr = OideProblem(k, env, p)
    fit = pr.fit(sol.lambda_hat, sol.x_star)
    targets = CorrectionVector(pr.g_vector(fit), k)
    got, _, _ = pr.solve_fit(targets, PremiumFit(fit.lam + 0.5, fit.x_star + 0.02, math.nan))
    assert abs(got.lam - fit.lam) < 1e-3
    assert abs(got.x_star - fit.x_star) < 1e-4
