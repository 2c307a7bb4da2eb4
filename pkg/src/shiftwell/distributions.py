"""Distribution functions built on the regularized incomplete beta and gamma
functions (continued fractions / series), plus the studentized range."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

_EPS = 1e-16
_FPMIN = 1e-300
_MAXIT = 10000


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc requires a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
           + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def _gammainc_series(a: float, x: float) -> float:
    ap = a
    total = delta = 1.0 / a
    for _ in range(_MAXIT):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise ArithmeticError(f"incomplete gamma series did not converge (a={a}, x={x})")


def _gammaincc_cf(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAXIT + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise ArithmeticError(f"incomplete gamma fraction did not converge (a={a}, x={x})")


def gammainc(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return _gammainc_series(a, x)
    return 1.0 - _gammaincc_cf(a, x)


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if x <= 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gammainc_series(a, x)
    return _gammaincc_cf(a, x)


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t)))


def chi2_sf(x: float, df: float) -> float:
    return gammaincc(df / 2.0, x / 2.0)


def f_sf(f: float, dfn: float, dfd: float) -> float:
    if f <= 0:
        return 1.0
    return betainc(dfd / 2.0, dfn / 2.0, dfd / (dfd + dfn * f))


# --- studentized range -------------------------------------------------------

@lru_cache(maxsize=None)
def _gl(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def _nodes(lo: float, hi: float, n_panels: int, order: int = 32):
    x, w = _gl(order)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = (edges[1:] - edges[:-1])[:, None] / 2.0
    mid = (edges[1:] + edges[:-1])[:, None] / 2.0
    return (mid + half * x).ravel(), (half * w).ravel()


_Z, _WZ = _nodes(-8.5, 8.5, 12)
_PHI_Z = np.exp(-0.5 * _Z ** 2) / math.sqrt(2 * math.pi)


def _range_cdf_normal(w: np.ndarray, k: int) -> np.ndarray:
    """P(range of k iid standard normals < w), vectorised over ``w``."""
    w = np.asarray(w, dtype=np.float64)[:, None]
    inner = np.clip(ndtr(_Z) - ndtr(_Z - w), 0.0, 1.0) ** (k - 1)
    return np.clip(k * (inner * (_PHI_Z * _WZ)).sum(axis=1), 0.0, 1.0)


def studentized_range_sf(q: float, k: int, df: float) -> float:
    """Upper tail P(Q > q) of the studentized range for ``k`` means and
    ``df`` error degrees of freedom, by Gauss-Legendre quadrature over the
    normal range distribution and the chi scale factor."""
    if q <= 0:
        return 1.0
    if k < 2:
        raise ValueError("studentized range needs k >= 2")
    if math.isinf(df):
        return float(1.0 - _range_cdf_normal(np.array([q]), k)[0])
    # scale s = sqrt(chi2_df / df); integrate over log s
    spread = 1.0 / math.sqrt(2.0 * df)
    lo = max(-40.0 * spread - 2.0 / df, -30.0)
    hi = 12.0 * spread + 0.5
    t, wt = _nodes(lo, hi, 24)
    s = np.exp(t)
    half = df / 2.0
    log_dens = (math.log(2.0) + half * math.log(half) - math.lgamma(half)
                + df * t - half * s * s)
    dens = np.exp(log_dens) * wt
    tail = 1.0 - _range_cdf_normal(q * s, k)
    return float(min(max((dens * tail).sum(), 0.0), 1.0))
