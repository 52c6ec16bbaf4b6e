"""Sampled Lipschitz ratios for streams, blocks and whole networks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .network import STREAM_ORDER, HycasNetwork, draw_block, _block_forward
from .noise import PHASE_EXPECTED, NoiseState, noise_stream
from .streams import stream_forward


def random_pairs(count: int, shape: tuple, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Input pairs mixing far-apart points with close ones at log-uniform distances."""
    x = rng.random((count,) + tuple(shape))
    far = rng.random((count,) + tuple(shape))
    direction = rng.standard_normal((count,) + tuple(shape))
    direction /= np.sqrt((direction ** 2).reshape(count, -1).sum(axis=1)).reshape((count,) + (1,) * len(shape))
    scale = 10.0 ** rng.uniform(-3, 0.5, size=count)
    near = x + scale.reshape((count,) + (1,) * len(shape)) * direction
    pick = (rng.random(count) < 0.5).reshape((count,) + (1,) * len(shape))
    return x, np.where(pick, far, near)


def ratios(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pair ||f(x) - f(y)|| / ||x - y||."""
    n = x.shape[0]
    fx, fy = f(x), f(y)
    num = np.sqrt(((fx - fy) ** 2).reshape(n, -1).sum(axis=1))
    den = np.sqrt(((x - y) ** 2).reshape(n, -1).sum(axis=1))
    keep = den > 0
    return num[keep] / den[keep]


def stream_map(net: HycasNetwork, block: int, variant: str, noise: NoiseState):
    """x -> stream output of one block under a fixed noise draw."""
    b = net.blocks[block]
    d = draw_block(b, [noise], block, net.input_shape[:2], net.stochastic)

    def f(x):
        mask = d.masks[variant]
        return stream_forward(T.constant(x), b.streams[variant], mask,
                              d.w_sn if variant == "RPFAN" else None).data

    return f


def block_map(net: HycasNetwork, block: int, noise: NoiseState):
    b = net.blocks[block]
    d = draw_block(b, [noise], block, net.input_shape[:2], net.stochastic)
    return lambda x: _block_forward(T.constant(x), b, d)[0].data


def logit_map(net: HycasNetwork, noise: NoiseState):
    return lambda x: net.logits(x, noise)


def expected_logit_map(net: HycasNetwork, samples: int, seed: int):
    """x -> logits averaged over ``samples`` internal-noise states (common to every input)."""
    states = noise_stream(seed, PHASE_EXPECTED, samples)
    draws = [net.draw([s]) for s in states]

    def f(x):
        total = np.zeros((x.shape[0], net.num_classes))
        xt = T.constant(x)
        for s, d in zip(states, draws):
            total += net.forward(xt, s, draws=d).data
        return total / samples

    return f


def stream_names(net: HycasNetwork) -> list[tuple[int, str]]:
    return [(i, v) for i in range(len(net.blocks)) for v in STREAM_ORDER]
