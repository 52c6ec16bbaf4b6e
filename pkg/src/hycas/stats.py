"""Gaussian quantiles and exact binomial confidence bounds."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats as _sps

# rational approximation coefficients for the normal quantile (Acklam)
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def gauss_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def inv_gauss_cdf(p: float) -> float:
    """Standard normal quantile; rational start plus one Halley refinement."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"inv_gauss_cdf: p must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    # work in the lower tail so the residual is computed without cancellation
    if p > 0.5:
        return -inv_gauss_cdf(1.0 - p)
    x = _acklam(p)
    e = gauss_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def binom_upper_tail(m: int, n: int, p: float) -> float:
    """P[Bin(n, p) >= m] = I_p(m, n - m + 1)."""
    if m <= 0:
        return 1.0
    if m > n:
        return 0.0
    return betainc_reg(m, n - m + 1, p)


def clopper_pearson_lower(m: int, n: int, conf: float) -> float:
    """One-sided exact lower confidence bound on a binomial proportion.

    Solves P[Bin(n, p) >= m] = 1 - conf for p by bisection to 1e-12 or finer.
    """
    m, n = int(m), int(n)
    if n < 1 or not 0 <= m <= n:
        raise ValueError(f"clopper_pearson_lower: need 0 <= m <= n, n >= 1 (got m={m}, n={n})")
    alpha = 1.0 - conf
    if not 0.0 < alpha < 1.0:
        raise ValueError("conf must lie in (0, 1)")
    if m == 0:
        return 0.0
    if m == n:
        return alpha ** (1.0 / n)
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-15:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if binom_upper_tail(m, n, mid) > alpha:
            hi = mid
        else:
            lo = mid
    return lo


def student_t_quantile(q: float, dof: int) -> float:
    return float(_sps.t.ppf(q, dof))


def mean_bounds_t(samples: np.ndarray, delta: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Student-t lower and upper bounds on column means, each at level 1 - delta."""
    s = np.asarray(samples, dtype=np.float64)
    n = s.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    mu = s.mean(axis=0)
    se = s.std(axis=0, ddof=1) / math.sqrt(n)
    t = _sps.t.ppf(1.0 - np.asarray(delta, dtype=np.float64), n - 1)
    return mu - t * se, mu + t * se


def mean_bounds_hoeffding(samples: np.ndarray, delta: np.ndarray | float, low: float,
                          high: float) -> tuple[np.ndarray, np.ndarray]:
    """Distribution-free one-sided bounds on means of samples clamped to [low, high]."""
    if not high > low:
        raise ValueError("clamp range must satisfy high > low")
    s = np.clip(np.asarray(samples, dtype=np.float64), low, high)
    n = s.shape[0]
    mu = s.mean(axis=0)
    w = (high - low) * np.sqrt(np.log(1.0 / np.asarray(delta, dtype=np.float64)) / (2.0 * n))
    return mu - w, mu + w
