"""Noise-augmented certified training and adversarial min-max training."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, frozen_parameters, pgd_attack
from .network import STREAM_ORDER, HycasNetwork, audit_kernels, calibrate, gate_weights
from .noise import PHASE_ATTACK, PHASE_TRAIN, noise_from_key
from .spectral import DEFAULT_PI_STEPS, normalize_kernel
from .streams import FDPAN, RPFAN, SNCAN

OPTIMIZERS = ("sgd", "sgd_momentum", "adamw")


class TrainingDivergence(RuntimeError):
    """The training loss became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-2
    optimizer: str = "sgd_momentum"
    sigma: float = 0.25
    # (zeta, phi, nu, kappa): FDPAN, SNCAN, RPFAN, fused
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    learnable_weights: bool = False
    attack: AttackConfig | None = None
    seed: int = 0
    weight_decay: float = 1e-4
    momentum: float = 0.9
    pi_steps: int = DEFAULT_PI_STEPS
    lr_decay: float = 1.0
    lr_decay_every: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        w = tuple(float(v) for v in self.loss_weights)
        if len(w) != 4 or not all(math.isfinite(v) and v >= 0 for v in w):
            raise ValueError("loss_weights must be four finite non-negative numbers")
        self.loss_weights = w
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class History:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    audits: list = field(default_factory=list)
    seconds: float = 0.0


# --------------------------------------------------------------------------
# loss


def hycas_loss(fused_logits: T.Tensor, stream_logits: dict, y, weights) -> T.Tensor:
    """kappa * CE(fused) + zeta * CE(FDPAN) + phi * CE(SNCAN) + nu * CE(RPFAN).

    Weights are floats or scalar Tensors (learnable mode).
    """
    zeta, phi, nu, kappa = weights
    terms = [(kappa, fused_logits), (zeta, stream_logits.get(FDPAN)),
             (phi, stream_logits.get(SNCAN)), (nu, stream_logits.get(RPFAN))]
    total = None
    for w, logits in terms:
        if isinstance(w, (int, float)) and w == 0:
            continue
        if logits is None:
            raise ValueError("a branch with non-zero weight has no logits")
        ce = T.softmax_crossentropy(logits, y)
        term = T.hadamard(ce, w) if isinstance(w, T.Tensor) else T.scale(ce, float(w))
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.constant(np.array(0.0))
    return total


class LossWeights:
    """Fixed weights, or exp of free scalars when learnable."""

    def __init__(self, init: tuple, learnable: bool):
        self.learnable = learnable
        if learnable:
            self.raw = [T.parameter(np.array(math.log(max(v, 1e-12)))) for v in init]
        else:
            self.fixed = tuple(init)

    def values(self):
        if not self.learnable:
            return self.fixed
        return tuple(_exp(r) for r in self.raw)

    def parameters(self) -> dict:
        if not self.learnable:
            return {}
        return {f"loss_weight.{n}": r for n, r in zip(("zeta", "phi", "nu", "kappa"), self.raw)}


def _exp(a: T.Tensor) -> T.Tensor:
    out = np.exp(a.data)
    return T._make(out, "exp", (a,), lambda g: (g * out,))


def network_loss(net: HycasNetwork, x: T.Tensor, y, noise, weights, draws=None):
    fused, aux = net.forward(x, noise, return_streams=True, draws=draws)
    return hycas_loss(fused, aux, y, weights), fused


# --------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.kind = cfg.optimizer
        self.lr = cfg.learning_rate
        self.wd = cfg.weight_decay
        self.momentum = cfg.momentum
        self.t = 0
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.kind == "adamw":
                m, v = self.state.get(name, (np.zeros_like(g), np.zeros_like(g)))
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.state[name] = (m, v)
                mh = m / (1 - 0.9 ** self.t)
                vh = v / (1 - 0.999 ** self.t)
                p.data = p.data * (1 - self.lr * self.wd) - self.lr * mh / (np.sqrt(vh) + 1e-8)
                continue
            g = g + self.wd * p.data
            if self.kind == "sgd_momentum":
                buf = self.state.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.state[name] = buf
                g = buf
            p.data = p.data - self.lr * g


# --------------------------------------------------------------------------
# loops


def _renormalise(net: HycasNetwork, method: str, steps: int, seed: int) -> None:
    hw = net.input_shape[:2]
    for i, k in enumerate(net.kernels()):
        normalize_kernel(k, hw, method, T=steps, seed=seed + i)


def _epoch_audit(net: HycasNetwork) -> dict:
    norms = audit_kernels(net)
    for block in net.blocks:
        a = gate_weights(block.gate_logits).data
        if np.any(a < 0) or not np.allclose(a.sum(axis=0), 1.0, atol=1e-12):
            raise AssertionError("gate weights left the simplex")
    return norms


def _check_finite(loss: float, epoch: int, batch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergence(f"loss became {loss} at epoch {epoch}, batch {batch}")


def _train(net: HycasNetwork, dataset, cfg: TrainConfig, adversarial: bool):
    x_all, y_all = dataset
    x_all = np.asarray(x_all, dtype=np.float64)
    y_all = np.asarray(y_all, dtype=np.int64)
    if adversarial and cfg.attack is None:
        raise ValueError("adversarial training needs cfg.attack")
    weights = LossWeights(cfg.loss_weights, cfg.learnable_weights)
    params = dict(net.named_parameters())
    params.update(weights.parameters())
    opt = Optimizer(params, cfg)
    hist = History()
    start = time.perf_counter()
    n = x_all.shape[0]
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_every and epoch and epoch % cfg.lr_decay_every == 0:
            opt.lr *= cfg.lr_decay
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, correct = 0.0, 0
        for b, a in enumerate(range(0, n, cfg.batch_size)):
            idx = order[a:a + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            if adversarial:
                attack_noise = noise_from_key(cfg.seed, PHASE_ATTACK, epoch, b)
                fixed = weights.values() if not weights.learnable else \
                    tuple(float(w.data) for w in weights.values())

                def attack_loss(model, xt, yy, noise, draws, _w=fixed):
                    loss, fused = network_loss(model, xt, yy, noise, _w, draws)
                    logp = T.log_softmax_array(fused.data)
                    return loss, -logp[np.arange(len(yy)), yy]

                cfg_a = AttackConfig(cfg.attack.epsilon, cfg.attack.step, cfg.attack.iters,
                                     cfg.attack.restarts, cfg.attack.norm,
                                     cfg.attack.seed * 1_000_003 + cfg.seed, cfg.attack.random_init)
                x = pgd_attack(net, x, y, cfg_a, attack_noise, loss_fn=attack_loss, key=(epoch, b))
            if cfg.sigma > 0:
                eps = np.random.default_rng([cfg.seed, PHASE_TRAIN, epoch, b]).standard_normal(x.shape)
                x = x + cfg.sigma * eps
            # one internal-noise draw shared by the whole minibatch
            noise = noise_from_key(cfg.seed, PHASE_TRAIN, epoch, b)
            opt.zero_grad()
            loss, fused = network_loss(net, T.constant(x), y, noise, weights.values())
            value = loss.item()
            _check_finite(value, epoch, b)
            T.backward(loss)
            opt.step()
            _renormalise(net, "power", cfg.pi_steps, cfg.seed)
            total += value * len(idx)
            correct += int((fused.data.argmax(axis=1) == y).sum())
        _renormalise(net, "fourier", cfg.pi_steps, cfg.seed)
        hist.audits.append(_epoch_audit(net))
        hist.loss.append(total / max(n, 1))
        hist.accuracy.append(correct / max(n, 1))
    calibrate(net)
    hist.seconds = time.perf_counter() - start
    return net, hist


def train_certified(net: HycasNetwork, dataset, cfg: TrainConfig):
    """Gaussian-noise training; internal noise resampled once per minibatch."""
    return _train(net, dataset, cfg, adversarial=False)


def train_adversarial(net: HycasNetwork, dataset, cfg: TrainConfig):
    """Min-max training on PGD examples crafted under a frozen per-batch attack noise."""
    return _train(net, dataset, cfg, adversarial=True)


def clean_accuracy(net: HycasNetwork, dataset, seed: int = 0) -> float:
    """Accuracy with one fresh internal-noise draw per example."""
    from .noise import PHASE_INFERENCE, noise_stream

    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return 0.0
    states = noise_stream(seed, PHASE_INFERENCE, x.shape[0])
    with frozen_parameters(net):
        pred = net.predict_labels(x, states)
    return float((pred == np.asarray(y)).mean())


__all__ = ["TrainConfig", "History", "TrainingDivergence", "hycas_loss", "train_certified",
           "train_adversarial", "clean_accuracy", "STREAM_ORDER"]
