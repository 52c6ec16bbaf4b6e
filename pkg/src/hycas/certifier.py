"""Randomized-smoothing and Lipschitz-margin certificates, and their combination."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import DRAW_CHUNK, require_calibrated
from .noise import (
    PHASE_EXPECTED,
    PHASE_FROZEN,
    PHASE_MAIN,
    PHASE_PILOT,
    NoiseState,
    noise_from_key,
    noise_stream,
    stack_epsilon,
)
from .stats import clopper_pearson_lower, inv_gauss_cdf, mean_bounds_hoeffding, mean_bounds_t

RS = "RS"
LIP = "LipMargin"
LCB = "LipMarginLCB"
ABSTAIN = -1

# draw lists longer than this are never kept in a cache
CACHE_LIMIT = 20000


@dataclass
class Certificate:
    label: int
    radius_l2: float
    radius_linf: float
    method: str
    abstain: bool
    confidence: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.abstain:
            self.radius_l2 = 0.0
            self.radius_linf = 0.0
        if self.radius_l2 < 0:
            raise ValueError("radius must be non-negative")


@dataclass(frozen=True)
class McConfig:
    n0: int = 100
    n: int = 100000
    alpha: float = 0.001
    sigma: float = 0.25

    def __post_init__(self):
        if self.n0 < 1 or self.n < self.n0:
            raise ValueError(f"need n0 >= 1 and n >= n0 (n0={self.n0}, n={self.n})")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def _linf(r2: float, d: int) -> float:
    return r2 / math.sqrt(d)


def _input_dim(net) -> int:
    return int(np.prod(net.input_shape))


# --------------------------------------------------------------------------
# Monte-Carlo plumbing


class DrawCache:
    """Memoises noise states and materialised draws for repeated (seed, phase, count) jobs.

    Certifying many inputs under one job seed reuses the same draws, which is
    where nearly all the per-sample cost lies.  Invalid once the model changes.
    """

    def __init__(self):
        self._states: dict = {}
        self._chunks: dict = {}

    def states(self, seed: int, phase: int, count: int, shape: tuple, sigma: float) -> list[NoiseState]:
        key = (seed, phase, count, tuple(shape), sigma)
        if key not in self._states:
            self._states[key] = noise_stream(seed, phase, count, shape, sigma)
        return self._states[key]

    def chunks(self, net, seed: int, phase: int, count: int, states: list[NoiseState]):
        if not hasattr(net, "draw_chunks") or count > CACHE_LIMIT:
            return None
        key = (id(net), seed, phase, count)
        if key not in self._chunks:
            self._chunks[key] = net.draw_chunks(states)
        return self._chunks[key]


def sample_counts(net, x: np.ndarray, sigma: float, count: int, seed: int, phase: int,
                  cache: DrawCache | None = None) -> np.ndarray:
    """Class histogram of the base classifier at ``x + eps`` over ``count`` (eps, Omega) draws."""
    shape = tuple(net.input_shape)
    if cache is not None:
        states = cache.states(seed, phase, count, shape, sigma)
        chunks = cache.chunks(net, seed, phase, count, states)
    else:
        states = noise_stream(seed, phase, count, shape, sigma)
        chunks = None
    counts = np.zeros(net.num_classes, dtype=np.int64)
    step = DRAW_CHUNK
    for j, a in enumerate(range(0, count, step)):
        part = states[a:a + step]
        xs = x[None] + stack_epsilon(part, shape)
        noise = [s.without_input_noise() for s in part]
        if chunks is not None:
            labels = net.predict_labels(xs, noise, chunks[j:j + 1])
        else:
            labels = net.predict_labels(xs, noise)
        counts += np.bincount(labels, minlength=net.num_classes)
    return counts


def expected_logits(net, x: np.ndarray, samples: int, seed: int, cache: DrawCache | None = None,
                    return_samples: bool = False):
    """Mean logits over internal randomness only (no input noise)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if not getattr(net, "stochastic", True):
        z = net.logits(x[None], frozen_noise(seed))
        z = np.repeat(z, samples, axis=0)
        return (z[0], z) if return_samples else z[0]
    if cache is not None:
        states = cache.states(seed, PHASE_EXPECTED, samples, tuple(net.input_shape), 0.0)
        chunks = cache.chunks(net, seed, PHASE_EXPECTED, samples, states)
    else:
        states = noise_stream(seed, PHASE_EXPECTED, samples)
        chunks = None
    xs = np.broadcast_to(x, (samples,) + x.shape)
    z = net.logits(xs, states, chunks) if samples > 1 else net.logits(xs, states)
    mean = z.mean(axis=0)
    return (mean, z) if return_samples else mean


# --------------------------------------------------------------------------
# margin certificates


def _top_two(z: np.ndarray) -> tuple[int, float, float]:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least two classes")
    order = np.argsort(-z, kind="stable")
    return int(order[0]), float(z[order[0]]), float(z[order[1]])


def margin_certificate(z: np.ndarray, d: int, confidence: float = 1.0) -> Certificate:
    """Radius gap/4 from the top-two logits of a (at most) 2-Lipschitz network."""
    label, s1, s2 = _top_two(z)
    gap = s1 - s2
    if gap <= 0:
        return Certificate(label, 0.0, 0.0, LIP, True, confidence, {"gap": gap})
    r = gap / 4.0
    return Certificate(label, r, _linf(r, d), LIP, False, confidence, {"gap": gap})


def margin_certificate_lcb(logit_samples: np.ndarray, alpha: float, d: int | None = None,
                           mode: str = "t", clamp: tuple[float, float] | None = None) -> Certificate:
    """Margin radius from a lower bound on the top mean logit minus upper bounds on the others.

    The top class takes alpha/2; the remaining alpha/2 is split evenly over the
    K-1 competitors so the joint statement holds at 1 - alpha.
    """
    s = np.asarray(logit_samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ValueError("need a (samples >= 2, classes) array")
    k = s.shape[1]
    if k < 2:
        raise ValueError("need at least two classes")
    d = k if d is None else d
    label = int(np.argmax(s.mean(axis=0)))
    delta = np.full(k, alpha / (2.0 * (k - 1)))
    delta[label] = alpha / 2.0
    if mode == "t":
        lo, hi = mean_bounds_t(s, delta)
    elif mode == "hoeffding":
        if clamp is None:
            raise ValueError("hoeffding mode needs a clamp range")
        lo, hi = mean_bounds_hoeffding(s, delta, *clamp)
    else:
        raise ValueError(f"unknown bound mode {mode!r}")
    others = np.delete(hi, label)
    gap = float(lo[label] - others.max())
    if gap <= 0:
        return Certificate(label, 0.0, 0.0, LCB, True, 1.0 - alpha, {"gap": gap})
    r = gap / 4.0
    return Certificate(label, r, _linf(r, d), LCB, False, 1.0 - alpha, {"gap": gap})


# --------------------------------------------------------------------------
# branches


def rs_certify(net, x: np.ndarray, cfg: McConfig, seed: int, cache: DrawCache | None = None) -> Certificate:
    """Smoothed-classifier certificate: pilot selects the class, main draws bound its probability."""
    x = np.asarray(x, dtype=np.float64)
    d = int(x.size)
    pilot = sample_counts(net, x, cfg.sigma, cfg.n0, seed, PHASE_PILOT, cache)
    guess = int(np.argmax(pilot))
    main = sample_counts(net, x, cfg.sigma, cfg.n, seed, PHASE_MAIN, cache)
    m = int(main[guess])
    p_lb = clopper_pearson_lower(m, cfg.n, 1.0 - cfg.alpha)
    extra = {"pilot": pilot, "counts": main, "p_lb": p_lb}
    if p_lb <= 0.5:
        return Certificate(guess, 0.0, 0.0, RS, True, 1.0 - cfg.alpha, extra)
    r = cfg.sigma * inv_gauss_cdf(p_lb)
    return Certificate(guess, r, _linf(r, d), RS, False, 1.0 - cfg.alpha, extra)


def frozen_noise(seed: int) -> NoiseState:
    return noise_from_key(seed, PHASE_FROZEN)


def lip_certify(net, x: np.ndarray, frozen: NoiseState) -> Certificate:
    """Margin certificate of the deterministic network obtained by fixing the internal noise."""
    require_calibrated(net)
    x = np.asarray(x, dtype=np.float64)
    z = net.logits(x[None], frozen)[0]
    cert = margin_certificate(z, int(x.size))
    cert.extra["logits"] = z
    return cert


def certify(net, x: np.ndarray, cfg: McConfig, seed: int, cache: DrawCache | None = None,
            lcb_samples: int = 0) -> Certificate:
    """Run both branches at alpha/2 each and keep the larger radius (ties go to RS)."""
    half = McConfig(cfg.n0, cfg.n, cfg.alpha / 2.0, cfg.sigma)
    rs = rs_certify(net, x, half, seed, cache)
    lip = lip_certify(net, x, frozen_noise(seed))
    branches = {RS: rs, LIP: lip}
    if lcb_samples >= 2:
        _, zs = expected_logits(net, x, lcb_samples, seed, cache, return_samples=True)
        branches[LCB] = margin_certificate_lcb(zs, cfg.alpha, int(np.size(x)))
    if rs.abstain and lip.abstain:
        winner = Certificate(ABSTAIN, 0.0, 0.0, RS, True, 1.0 - cfg.alpha)
    else:
        best = rs if rs.radius_l2 >= lip.radius_l2 else lip
        winner = Certificate(best.label, best.radius_l2, best.radius_linf, best.method, best.abstain,
                             1.0 - cfg.alpha)
    winner.extra["branches"] = branches
    return winner


def certified_accuracy(certs: list[Certificate], labels, radii) -> list[float]:
    """Fraction of points certified correct with radius at least r, for each r."""
    labels = np.asarray(labels)
    out = []
    for r in radii:
        ok = [not c.abstain and c.label == y and c.radius_l2 >= r for c, y in zip(certs, labels)]
        out.append(float(np.mean(ok)) if ok else 0.0)
    return out
