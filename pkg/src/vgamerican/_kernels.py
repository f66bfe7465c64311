"""Compiled inner loops: special functions, curve lookups and the OIDE residual.

Everything here works on plain floats and arrays so that numba can compile
it once (``cache=True``) and the pricing path avoids Python overhead.  The
public, validated interfaces live in :mod:`vgamerican.quad_core` and
:mod:`vgamerican.euro_fft`.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

EULER_GAMMA = 0.5772156649015329
_EPS = 2.220446049250313e-16
_FPMIN = 1e-300
NEAR = 0.05
GL_X, GL_W = np.polynomial.legendre.leggauss(16)

# ---------------------------------------------------------------------------
# special functions


@njit(cache=True)
def e1(x):
    """Exponential integral E1(x) for x > 0 (continued fraction / series)."""
    if x <= 0.0:
        return np.inf
    if x > 1.0:
        b = x + 1.0
        c = 1.0 / _FPMIN
        d = 1.0 / b
        h = d
        for i in range(1, 500):
            an = -float(i * i)
            b += 2.0
            d = 1.0 / (an * d + b)
            c = b + an / c
            de = c * d
            h *= de
            if abs(de - 1.0) < _EPS:
                break
        return h * math.exp(-x)
    ans = -math.log(x) - EULER_GAMMA
    fact = 1.0
    for i in range(1, 500):
        fact *= -x / i
        de = -fact / i
        ans += de
        if abs(de) < abs(ans) * _EPS:
            break
    return ans


@njit(cache=True)
def ei(x):
    """Exponential integral Ei(x) for x > 0."""
    if x < _FPMIN:
        return math.log(x) + EULER_GAMMA
    if x <= 36.7:
        s = 0.0
        fact = 1.0
        for k in range(1, 500):
            fact *= x / k
            term = fact / k
            s += term
            if term < _EPS * s:
                break
        return s + math.log(x) + EULER_GAMMA
    s = 1.0
    term = 1.0
    for k in range(1, 200):
        prev = term
        term *= k / x
        if term < _EPS:
            break
        if term < prev:
            s += term
        else:
            s -= prev
            break
    return math.exp(x) * s / x


@njit(cache=True)
def ein(z):
    """Ein(z) = int_0^z (1 - e^-t)/t dt for real z."""
    if -12.0 < z < 2.0:
        # sum_{k>=1} (-1)^{k+1} z^k / (k k!); terms share a sign for z < 0
        term = z
        acc = z
        for k in range(2, 80):
            term = -term * z / k
            inc = term / k
            acc += inc
            if abs(inc) < _EPS * abs(acc):
                break
        return acc
    if z > 0.0:
        return e1(z) + math.log(z) + EULER_GAMMA
    return EULER_GAMMA + math.log(-z) - ei(-z)


# ---------------------------------------------------------------------------
# European curve


@njit(cache=True, fastmath=True)
def fft_integrand(n, m, eta, a, s2n, thn, tnu, drift, b, rT):
    """Damped Carr-Madan integrand with trapezoid weights on the first m frequencies.

    The real part of the damped transform is even in v, so the half weight
    at v = 0 makes this the full-line trapezoid rule, whose only aliasing
    is at the full period n*dk.  (Simpson weights add an alias at half that
    period, about e^{-a n dk / 2} / 3 in unit-spot price.)
    """
    out = np.zeros(n, dtype=np.complex128)
    c = a + 1.0
    # with u = v - i c: z(u) = 1 + s2n u^2 - i thn u, written in real arithmetic
    zr0 = 1.0 - s2n * c * c - thn * c
    re0 = drift * c - rT
    for j in range(m):
        v = j * eta
        zr = zr0 + s2n * v * v
        zi = -(2.0 * s2n * c + thn) * v
        # exp(-tnu log z + i (drift u + b v) - rT)
        mod = math.exp(re0 - 0.5 * tnu * math.log(zr * zr + zi * zi))
        ph = -tnu * math.atan2(zi, zr) + (drift + b) * v
        dr = a * a + a - v * v
        di = (2.0 * a + 1.0) * v
        scale = mod * (0.5 if j == 0 else 1.0) * eta / (dr * dr + di * di)
        cr = math.cos(ph)
        ci = math.sin(ph)
        out[j] = complex((cr * dr + ci * di) * scale, (ci * dr - cr * di) * scale)
    return out


@njit(cache=True)
def call_unit(m, calls, m0, dm, hi):
    """Unit-spot call at log-strike m by cubic Lagrange; zero above ``hi``."""
    if m > hi:
        return 0.0
    t = (m - m0) / dm
    i = int(math.floor(t))
    f = t - i
    fm1 = f + 1.0
    f1 = f - 1.0
    f2 = f - 2.0
    return (
        -f * f1 * f2 / 6.0 * calls[i - 1]
        + fm1 * f1 * f2 / 2.0 * calls[i]
        - fm1 * f * f2 / 2.0 * calls[i + 1]
        + fm1 * f * f1 / 6.0 * calls[i + 2]
    )


# ---------------------------------------------------------------------------
# OIDE residual
#
# ``cst`` packs the per-problem scalars:
#   0 ln K, 1 K(1-e^{-rT}), 2 (1-e^{-qT}), 3 lambda_p, 4 lambda_n, 5 nu,
#   6 r-q+omega, 7 r/(1-e^{-rT}), 8 cusp log-spot, 9 curve m0, 10 curve dm,
#   11 curve hi


@njit(cache=True)
def exercise_value(z, cst, calls):
    """K - e^z - p(e^z) written through the call and parity."""
    ez = math.exp(z)
    c = ez * call_unit(cst[0] - z, calls, cst[9], cst[10], cst[11])
    return cst[1] - ez * cst[2] - c


@njit(cache=True)
def _panel_sum(lo, hi, x, ln, nu, calls, cst, mode, w0):
    """GL sum over [lo, hi] of the exercise-branch integrand.

    mode 0: (W(x-u) - w0) k(-u); mode 1: W(x-u) k(-u) and int k(-u);
    mode 2: call part e^{x-u} C(ln K - x + u) k(-u).
    """
    s = 0.0
    s_k = 0.0
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    for j in range(GL_X.shape[0]):
        u = mid + half * GL_X[j]
        kern = math.exp(-ln * u) / (nu * u)
        wt = half * GL_W[j]
        if mode == 2:
            s += wt * math.exp(x - u) * call_unit(cst[0] - x + u, calls, cst[9], cst[10], cst[11]) * kern
        else:
            s += wt * (exercise_value(x - u, cst, calls) - w0) * kern
            s_k += wt * kern
    return s, s_k


@njit(cache=True)
def _split_sum(lo, hi, x, ln, nu, calls, cst, mode, w0):
    """Panel sum with a breakpoint at the density cusp when it falls inside."""
    uc = x - cst[8]
    if lo < uc < hi:
        s1, k1 = _panel_sum(lo, uc, x, ln, nu, calls, cst, mode, w0)
        s2, k2 = _panel_sum(uc, hi, x, ln, nu, calls, cst, mode, w0)
        return s1 + s2, k1 + k2
    return _panel_sum(lo, hi, x, ln, nu, calls, cst, mode, w0)


@njit(cache=True)
def exercise_parts(x, x_star, cst, calls):
    """(A, B) with the y < x* - x part of the jump integral equal to A - w(x) B."""
    d = x - x_star
    ln = cst[4]
    nu = cst[5]
    a = max(d, NEAR)
    A = 0.0
    B = 0.0
    if d < NEAR:
        if d == 0.0:
            w0 = exercise_value(x_star, cst, calls)
            s, _ = _split_sum(d, NEAR, x, ln, nu, calls, cst, 0, w0)
            A += s - w0 * e1(ln * a) / nu
        else:
            s, sk = _split_sum(d, NEAR, x, ln, nu, calls, cst, 1, 0.0)
            A += s
            B += sk
    if d > 0.0:
        B += e1(ln * a) / nu
    A += cst[1] * e1(ln * a) / nu
    A -= math.exp(x) * cst[2] * e1((ln + 1.0) * a) / nu
    u_max = x - cst[0] + cst[11]
    lo = a
    step = 0.02
    while lo < u_max:
        hi = min(lo + step, u_max)
        s, _ = _split_sum(lo, hi, x, ln, nu, calls, cst, 2, 0.0)
        A -= s
        lo = hi
        step *= 2.0
    return A, B


@njit(cache=True)
def lambda_factor(lam, d, cst):
    """Coefficient of w(x) in g on the exponential branch (without B)."""
    if d > 0.0:
        return _lambda_factor(lam, d, ein(cst[4] * d), cst)
    return _lambda_factor(lam, d, 0.0, cst)


@njit(cache=True)
def _lambda_factor(lam, d, ein_ln_d, cst):
    lp = cst[3]
    nu = cst[5]
    out = cst[6] * lam - cst[7] + math.log(lp / (lp - lam)) / nu
    if d > 0.0:
        out += (ein_ln_d - ein((cst[4] + lam) * d)) / nu
    return out


@njit(cache=True)
def collocation_parts(x_star, n, cst, calls):
    """Offsets d_i, parts A_i, B_i and b at the N+1 collocation points.

    ``B_i`` also absorbs the lambda-independent ``-Ein(lambda_n d_i)/nu`` so
    that ``g_i = e^{lam d_i + b} (F(lam, d_i) - B_i) + A_i`` with ``F`` from
    :func:`_lambda_factor` called with a zero Ein argument.  ``b`` is NaN
    when the boundary is infeasible.
    """
    gap = cst[0] - x_star
    d = np.empty(n + 1)
    A = np.empty(n + 1)
    B = np.empty(n + 1)
    w0 = exercise_value(x_star, cst, calls)
    if not w0 > 0.0:
        return d, A, B, np.nan
    for i in range(n + 1):
        d[i] = 2.0 * i / n * gap
        A[i], B[i] = exercise_parts(x_star + d[i], x_star, cst, calls)
        # lambda-independent part of the Ein difference, folded into B
        if d[i] > 0.0:
            B[i] -= ein(cst[4] * d[i]) / cst[5]
    return d, A, B, math.log(w0)


@njit(cache=True)
def g_from_parts(lam, d, A, B, b, cst):
    g = np.empty(d.shape[0])
    for i in range(d.shape[0]):
        g[i] = math.exp(lam * d[i] + b) * (_lambda_factor(lam, d[i], 0.0, cst) - B[i]) + A[i]
    return g


@njit(cache=True)
def loss_from_parts(lam, d, A, B, b, cst, targets):
    s = 0.0
    for i in range(d.shape[0]):
        gi = math.exp(lam * d[i] + b) * (_lambda_factor(lam, d[i], 0.0, cst) - B[i]) + A[i]
        s += (gi - targets[i]) ** 2
    return s


# ---------------------------------------------------------------------------
# nested bounded Brent search


@njit(cache=True)
def feasible_edge(t_lo, t_hi, cst, calls):
    """Smallest t = ln(ln K - x*) in [t_lo, t_hi] with K - e^x* - p(e^x*) > 0.

    The exercise value is decreasing in the spot, so feasibility is an
    interval in t and bisection applies.  Returns NaN if t_hi is infeasible.
    """
    if not exercise_value(cst[0] - math.exp(t_hi), cst, calls) > 0.0:
        return np.nan
    if exercise_value(cst[0] - math.exp(t_lo), cst, calls) > 0.0:
        return t_lo
    lo, hi = t_lo, t_hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if exercise_value(cst[0] - math.exp(mid), cst, calls) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return hi


@njit(cache=True)
def _inner(s, d, A, B, b, cst, targets):
    return loss_from_parts(-math.exp(s), d, A, B, b, cst, targets)


@njit(cache=True)
def brent_inner(lo, hi, xtol, d, A, B, b, cst, targets):
    """Bounded Brent minimisation of the loss over s = ln(-lambda)."""
    golden = 0.3819660112501051
    a, bb = lo, hi
    v = w = x = a + golden * (bb - a)
    fv = fw = fx = _inner(x, d, A, B, b, cst, targets)
    e = 0.0
    dd = 0.0
    for _ in range(200):
        m = 0.5 * (a + bb)
        tol1 = 1e-10 * abs(x) + xtol / 3.0
        tol2 = 2.0 * tol1
        if abs(x - m) <= tol2 - 0.5 * (bb - a):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * e) and p > q * (a - x) and p < q * (bb - x):
                e = dd
                dd = p / q
                u = x + dd
                if u - a < tol2 or bb - u < tol2:
                    dd = tol1 if x < m else -tol1
                use_golden = False
        if use_golden:
            e = (bb - x) if x < m else (a - x)
            dd = golden * e
        u = x + (dd if abs(dd) >= tol1 else (tol1 if dd > 0 else -tol1))
        fu = _inner(u, d, A, B, b, cst, targets)
        if fu <= fx:
            if u < x:
                bb = x
            else:
                a = x
            v, fv = w, fw
            w, fw = x, fx
            x, fx = u, fu
        else:
            if u < x:
                a = u
            else:
                bb = u
            if fu <= fw or w == x:
                v, fv = w, fw
                w, fw = u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


@njit(cache=True)
def profile_loss(t, n, cst, calls, targets, s_lo, s_hi, penalty):
    """min over lambda of the loss at x* = ln K - e^t; returns (loss, s)."""
    x_star = cst[0] - math.exp(t)
    d, A, B, b = collocation_parts(x_star, n, cst, calls)
    if not b == b:
        return penalty, 0.5 * (s_lo + s_hi)
    # coarse scan guards against a wrong basin before the Brent polish
    best_s = s_lo
    best_f = np.inf
    for k in range(8):
        s = s_lo + (s_hi - s_lo) * (k + 0.5) / 8.0
        f = _inner(s, d, A, B, b, cst, targets)
        if f < best_f:
            best_f, best_s = f, s
    width = (s_hi - s_lo) / 8.0
    s, f = brent_inner(max(s_lo, best_s - width), min(s_hi, best_s + width), 1e-8,
                       d, A, B, b, cst, targets)
    if f > best_f:
        return best_f, best_s
    return f, s


@njit(cache=True)
def brent_outer(lo, hi, xtol, n, cst, calls, targets, s_lo, s_hi, penalty):
    """Bounded Brent over t = ln(ln K - x*) of the lambda-profiled loss."""
    golden = 0.3819660112501051
    a, bb = lo, hi
    v = w = x = a + golden * (bb - a)
    fx, sx = profile_loss(x, n, cst, calls, targets, s_lo, s_hi, penalty)
    fv = fw = fx
    e = 0.0
    dd = 0.0
    nev = 1
    for _ in range(100):
        m = 0.5 * (a + bb)
        tol1 = 1e-10 * abs(x) + xtol / 3.0
        tol2 = 2.0 * tol1
        if abs(x - m) <= tol2 - 0.5 * (bb - a):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * e) and p > q * (a - x) and p < q * (bb - x):
                e = dd
                dd = p / q
                u = x + dd
                if u - a < tol2 or bb - u < tol2:
                    dd = tol1 if x < m else -tol1
                use_golden = False
        if use_golden:
            e = (bb - x) if x < m else (a - x)
            dd = golden * e
        u = x + (dd if abs(dd) >= tol1 else (tol1 if dd > 0 else -tol1))
        fu, su = profile_loss(u, n, cst, calls, targets, s_lo, s_hi, penalty)
        nev += 1
        if fu <= fx:
            if u < x:
                bb = x
            else:
                a = x
            v, fv = w, fw
            w, fw = x, fx
            x, fx, sx = u, fu, su
        else:
            if u < x:
                a = u
            else:
                bb = u
            if fu <= fw or w == x:
                v, fv = w, fw
                w, fw = u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, sx, fx, nev
