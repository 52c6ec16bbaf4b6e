"""White-box l-infinity attacks under frozen internal noise, and robust accuracy."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .noise import PHASE_INFERENCE, noise_stream

APGD_MOMENTUM = 0.75
APGD_WINDOW = 0.22


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step: float = 20 / 255
    iters: int = 20
    restarts: int = 5
    norm: str = "linf"
    seed: int = 0
    random_init: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.norm != "linf":
            raise ValueError(f"only the linf norm is supported, got {self.norm!r}")


# loss_fn(net, x_tensor, y, noise, draws) -> (scalar loss Tensor, per-sample loss array)
LossFn = Callable


def ce_loss(net, x: T.Tensor, y: np.ndarray, noise, draws) -> tuple[T.Tensor, np.ndarray]:
    logits = net.forward(x, noise, draws=draws)
    logp = T.log_softmax_array(logits.data)
    per = -logp[np.arange(len(y)), y]
    return T.softmax_crossentropy(logits, y), per


@contextlib.contextmanager
def frozen_parameters(net):
    """Temporarily stop recording parameter gradients (only the input is differentiated)."""
    params = list(net.named_parameters().values()) if hasattr(net, "named_parameters") else []
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _init(x: np.ndarray, cfg: AttackConfig, restart: int, key: tuple) -> np.ndarray:
    if not cfg.random_init or cfg.epsilon == 0:
        return _project(x.copy(), x, cfg.epsilon)
    rng = np.random.default_rng([cfg.seed, restart, *key])
    return _project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon)


def _materialise(net, noise):
    if hasattr(net, "draw"):
        states = list(noise) if isinstance(noise, (list, tuple)) else [noise]
        return net.draw(states)
    return None


def _grad(net, x_adv, y, noise, draws, loss_fn):
    xt = T.parameter(x_adv)
    loss, per = loss_fn(net, xt, y, noise, draws)
    T.backward(loss)
    g = xt.grad if xt.grad is not None else np.zeros_like(x_adv)
    return g, per


def _per_sample_loss(net, x_adv, y, noise, draws, loss_fn) -> np.ndarray:
    return loss_fn(net, T.constant(x_adv), y, noise, draws)[1]


def _run(net, x, y, cfg, noise, loss_fn, key, step_fn):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    draws = _materialise(net, noise)
    best_x = None
    best_loss = None
    with frozen_parameters(net):
        for r in range(cfg.restarts):
            cand, cand_loss = step_fn(net, x, y, cfg, noise, draws, loss_fn, _init(x, cfg, r, key))
            if best_x is None:
                best_x, best_loss = cand, cand_loss
                continue
            better = cand_loss > best_loss
            best_x[better] = cand[better]
            best_loss = np.where(better, cand_loss, best_loss)
    return best_x


def _pgd_run(net, x, y, cfg, noise, draws, loss_fn, x_adv):
    best = x_adv.copy()
    best_loss = _per_sample_loss(net, x_adv, y, noise, draws, loss_fn)
    for _ in range(cfg.iters):
        g, _ = _grad(net, x_adv, y, noise, draws, loss_fn)
        x_adv = _project(x_adv + cfg.step * np.sign(g), x, cfg.epsilon)
        loss = _per_sample_loss(net, x_adv, y, noise, draws, loss_fn)
        better = loss > best_loss
        best[better] = x_adv[better]
        best_loss = np.where(better, loss, best_loss)
    return best, best_loss


def _apgd_run(net, x, y, cfg, noise, draws, loss_fn, x_adv):
    n = x.shape[0]
    shape = (n,) + (1,) * (x.ndim - 1)
    eta = np.full(n, cfg.step)
    window = max(1, math.ceil(APGD_WINDOW * cfg.iters))
    best = x_adv.copy()
    best_loss = _per_sample_loss(net, x_adv, y, noise, draws, loss_fn)
    last_check = best_loss.copy()
    prev = x_adv.copy()
    for k in range(1, cfg.iters + 1):
        g, _ = _grad(net, x_adv, y, noise, draws, loss_fn)
        z = _project(x_adv + eta.reshape(shape) * np.sign(g), x, cfg.epsilon)
        if k == 1:
            nxt = z
        else:
            nxt = _project(x_adv + APGD_MOMENTUM * (z - x_adv) + (1 - APGD_MOMENTUM) * (x_adv - prev),
                           x, cfg.epsilon)
        prev, x_adv = x_adv, nxt
        loss = _per_sample_loss(net, x_adv, y, noise, draws, loss_fn)
        better = loss > best_loss
        best[better] = x_adv[better]
        best_loss = np.where(better, loss, best_loss)
        if k % window == 0:
            stalled = best_loss <= last_check
            # halve the step and restart from the best point where progress stalled
            eta = np.where(stalled, eta / 2.0, eta)
            x_adv[stalled] = best[stalled]
            prev[stalled] = best[stalled]
            last_check = best_loss.copy()
    return best, best_loss


def pgd_attack(net, x, y, cfg: AttackConfig, attack_noise, loss_fn: LossFn = ce_loss,
               key: tuple = ()) -> np.ndarray:
    """Sign-gradient ascent with projection; best iterate per sample over restarts."""
    return _run(net, x, y, cfg, attack_noise, loss_fn, key, _pgd_run)


def apgd_attack(net, x, y, cfg: AttackConfig, attack_noise, loss_fn: LossFn = ce_loss,
                key: tuple = ()) -> np.ndarray:
    """Momentum sign steps with per-sample step halving at fixed checkpoints."""
    return _run(net, x, y, cfg, attack_noise, loss_fn, key, _apgd_run)


ATTACKS = {"pgd": pgd_attack, "apgd": apgd_attack}


def attack_batch(net, x, y, cfg: AttackConfig, method: str = "apgd", start: int = 0):
    """Attack one batch; every example gets its own inference noise keyed by its dataset index.

    Returns (clean predictions, attacked predictions, adversarial inputs).
    """
    if method not in ATTACKS:
        raise ValueError(f"unknown attack method {method!r}")
    x = np.asarray(x, dtype=np.float64)
    states = noise_stream(cfg.seed, PHASE_INFERENCE, x.shape[0], start=start)
    draws = _materialise(net, states)
    clean = net.forward(T.constant(x), states, draws=draws).data.argmax(axis=1)
    x_adv = ATTACKS[method](net, x, y, cfg, states, key=(start,))
    adv = net.forward(T.constant(x_adv), states, draws=draws).data.argmax(axis=1)
    return clean, adv, x_adv


def robust_accuracy(net, dataset, cfg: AttackConfig, method: str = "apgd", batch_size: int = 64) -> float:
    """Fraction of examples still classified correctly after the attack."""
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        return 0.0
    correct = 0
    for a in range(0, x.shape[0], batch_size):
        _, adv, _ = attack_batch(net, x[a:a + batch_size], y[a:a + batch_size], cfg, method, start=a)
        correct += int((adv == y[a:a + batch_size]).sum())
    return correct / x.shape[0]
