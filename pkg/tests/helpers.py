"""Shared oracles and fixtures-in-code for the test suite."""

from __future__ import annotations

import numpy as np

from hycas import tensor as T


def fd_check(fn, x: np.ndarray, coords: int = 20, step: float = 1e-5, seed: int = 0):
    """Max relative error between reverse-mode and central-difference partials of scalar ``fn``.

    ``fn`` maps a Tensor to a scalar Tensor.  Coordinates are sampled without replacement.
    """
    x = np.array(x, dtype=np.float64)
    _, g = T.grad_of(fn, x)
    rng = np.random.default_rng(seed)
    idx = rng.choice(x.size, size=min(coords, x.size), replace=False)
    worst = 0.0
    for i in idx:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = fn(T.constant(xp.reshape(x.shape))).item()
        fm = fn(T.constant(xm.reshape(x.shape))).item()
        num = (fp - fm) / (2 * step)
        ana = g.reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def circulant_matrix(kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """Dense matrix of the stride-1 circular cross-correlation, built by index arithmetic."""
    kh, kw, cin, cout = kernel.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    m = np.zeros((h * w * cout, h * w * cin))
    for i in range(h):
        for j in range(w):
            for a in range(kh):
                for b in range(kw):
                    si, sj = (i + a - ph) % h, (j + b - pw) % w
                    for c in range(cin):
                        for o in range(cout):
                            m[(i * w + j) * cout + o, (si * w + sj) * cin + c] += kernel[a, b, c, o]
    return m


def gaussian_quantile_by_quadrature(p: float) -> float:
    """Normal quantile from Simpson integration of the density plus bisection."""
    def cdf(x):
        # integrate the density from 0 to x with a fine composite Simpson rule
        n = 20000
        t = np.linspace(0.0, x, n + 1)
        f = np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
        hstep = x / n
        return 0.5 + hstep / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum())

    lo, hi = -10.0, 10.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def binomial_tail_lower(m: int, n: int, alpha: float) -> float:
    """Clopper-Pearson lower bound by bisection on an explicit log-space binomial tail sum."""
    from math import lgamma

    if m == 0:
        return 0.0
    k = np.arange(m, n + 1)
    logc = np.array([lgamma(n + 1) - lgamma(i + 1) - lgamma(n - i + 1) for i in k])

    def tail(p):
        if p <= 0:
            return 0.0
        if p >= 1:
            return 1.0
        terms = logc + k * np.log(p) + (n - k) * np.log1p(-p)
        top = terms.max()
        return float(np.exp(top) * np.exp(terms - top).sum())

    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if tail(mid) > alpha:
            hi = mid
        else:
            lo = mid
    return lo


ACCEPTANCE: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Log one acceptance verdict; conftest prints the collected lines after the run."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


class HalfspaceClassifier:
    """Base classifier sign(x[0] - offset) with no internal randomness.

    Under N(0, sigma^2 I) input noise the smoothed top-class probability is
    Phi(|x0 - offset| / sigma), so the true certified radius is |x0 - offset|.
    """

    num_classes = 2

    def __init__(self, dim: int = 4, offset: float = 0.0):
        self.input_shape = (dim,)
        self.offset = offset

    def predict_labels(self, x, noise=None, chunks=None):
        return (np.asarray(x)[:, 0] > self.offset).astype(np.int64)
