"""Convex channel-gated fusion of the three streams, stacked into a classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .noise import NoiseState
from .spectral import KernelSpec, spectral_norm_fourier
from .streams import (
    FDPAN,
    RPFAN,
    SNCAN,
    SPECTRAL_TOL,
    VARIANTS,
    RaniParams,
    StreamParams,
    UnauditedKernelError,
    draw_projection_filters,
    make_stream,
    rani_apply,
    rani_draws,
    rani_mask_tensor,
    stream_forward,
)
from .tensor import Tensor

STREAM_ORDER = VARIANTS  # gate rows: FDPAN, SNCAN, RPFAN
LIP_PER_BLOCK = 2.0
LIP_TARGET = 2.0
# largest number of noise draws pushed through one forward pass
DRAW_CHUNK = 256


class UncalibratedError(ValueError):
    """Network Lipschitz bound exceeds the calibrated target."""


@dataclass
class HycasBlock:
    streams: dict[str, StreamParams]
    gate_logits: Tensor  # (3, C)
    in_channels: int
    out_channels: int
    fusion_rani: RaniParams | None = None

    @property
    def fusion_enabled(self) -> bool:
        return self.fusion_rani is not None


@dataclass
class BlockDraws:
    masks: dict[str, Tensor | None]
    w_sn: np.ndarray | None
    fusion_mask: Tensor | None = None


@dataclass
class HycasNetwork:
    input_shape: tuple  # (H, W, C)
    num_classes: int
    blocks: list[HycasBlock]
    head_weight: Tensor
    head_bias: Tensor
    aux_heads: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)
    calibrator_gamma: float = 1.0
    lip_bound: float | None = None
    stochastic: bool = True
    arch: dict = field(default_factory=dict)

    # ------------------------------------------------------------------
    def kernels(self) -> list[KernelSpec]:
        out = []
        for block in self.blocks:
            for v in STREAM_ORDER:
                out.extend(block.streams[v].kernels)
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for v in STREAM_ORDER:
                s = block.streams[v]
                for k in s.kernels:
                    params[f"blocks.{i}.{v}.kernel"] = k.weight
                for name, p in s.rani.parameters().items():
                    params[f"blocks.{i}.{v}.rani.{name}"] = p
            params[f"blocks.{i}.gate"] = block.gate_logits
            if block.fusion_rani is not None:
                for name, p in block.fusion_rani.parameters().items():
                    params[f"blocks.{i}.fusion.rani.{name}"] = p
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        for v, (w, b) in self.aux_heads.items():
            params[f"aux.{v}.weight"] = w
            params[f"aux.{v}.bias"] = b
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        """Frozen, non-trainable arrays that still define the model (orthogonal mixers)."""
        out = {}
        for i, block in enumerate(self.blocks):
            for v in (FDPAN, RPFAN):
                out[f"blocks.{i}.{v}.mixer"] = block.streams[v].mixer.U
        return out

    def block_input_hw(self) -> tuple:
        return self.input_shape[:2]

    # ------------------------------------------------------------------
    def draw(self, states: Sequence[NoiseState]) -> list[BlockDraws]:
        """Materialise masks and projection filters for a list of noise states."""
        hw = self.input_shape[:2]
        return [draw_block(block, states, i, hw, self.stochastic) for i, block in enumerate(self.blocks)]

    def forward(self, x: Tensor, noise, return_streams: bool = False,
                draws: list[BlockDraws] | None = None):
        """Logits (N, K) for a batch under one shared NoiseState or one per sample.

        ``draws`` short-circuits the noise materialisation with output of :meth:`draw`.
        """
        states = list(noise) if isinstance(noise, (list, tuple)) else [noise]
        if len(states) not in (1, x.shape[0]):
            raise T.ShapeError(f"{len(states)} noise states for a batch of {x.shape[0]}")
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise T.ShapeError(f"input shape {x.shape[1:]} vs network {self.input_shape}")
        if draws is None:
            draws = self.draw(states)
        h = x
        streams = {}
        for block, d in zip(self.blocks, draws):
            h, streams = _block_forward(h, block, d)
            if block.out_channels % 2 == 0:
                h = T.groupsort2(h)
        logits = T.dense(T.flatten(h), self.head_weight, self.head_bias)
        if not return_streams:
            return logits
        aux = {v: T.dense(T.gap(streams[v]), *self.aux_heads[v]) for v in STREAM_ORDER}
        return logits, aux

    def draw_chunks(self, states: Sequence[NoiseState]) -> list[list[BlockDraws]]:
        """Materialised draws for a long state list, split as :meth:`logits` consumes them."""
        return [self.draw(states[a:a + DRAW_CHUNK]) for a in range(0, len(states), DRAW_CHUNK)]

    def logits(self, x: np.ndarray, noise, chunks: list | None = None) -> np.ndarray:
        """Gradient-free logits; per-sample noise lists are processed in chunks.

        ``chunks`` (from :meth:`draw_chunks` on the same states) lets callers reuse
        materialised noise across many inputs.
        """
        x = np.asarray(x, dtype=np.float64)
        states = list(noise) if isinstance(noise, (list, tuple)) else [noise]
        if len(states) == 1:
            return self.forward(T.constant(x), states).data
        if len(states) != x.shape[0]:
            raise T.ShapeError(f"{len(states)} noise states for a batch of {x.shape[0]}")
        out = []
        for j, a in enumerate(range(0, x.shape[0], DRAW_CHUNK)):
            d = chunks[j] if chunks is not None else None
            out.append(self.forward(T.constant(x[a:a + DRAW_CHUNK]), states[a:a + DRAW_CHUNK],
                                    draws=d).data)
        return np.concatenate(out, axis=0)

    def predict_labels(self, x: np.ndarray, noise, chunks: list | None = None) -> np.ndarray:
        return self.logits(x, noise, chunks).argmax(axis=1)


def gate_weights(gate_logits) -> Tensor:
    """Per-channel softmax over the stream axis of a (3, C) logit matrix."""
    return T.softmax(gate_logits if isinstance(gate_logits, Tensor) else T.constant(gate_logits), axis=0)


def fuse(outputs: dict[str, Tensor], gate_logits: Tensor) -> Tensor:
    alpha = gate_weights(gate_logits)
    z = None
    for j, v in enumerate(STREAM_ORDER):
        g = outputs[v]
        term = T.hadamard(T.expand_channels(T.take(alpha, j), g.shape), g)
        z = term if z is None else T.add(z, term)
    return z


def _block_forward(x: Tensor, block: HycasBlock, draws: BlockDraws) -> tuple[Tensor, dict[str, Tensor]]:
    outputs = {}
    for v in STREAM_ORDER:
        outputs[v] = stream_forward(x, block.streams[v], draws.masks[v],
                                    draws.w_sn if v == RPFAN else None)
    shapes = {o.shape for o in outputs.values()}
    if len(shapes) != 1:
        raise T.ShapeError(f"stream output shapes differ: {shapes}")
    z = fuse(outputs, block.gate_logits)
    if block.fusion_rani is not None:
        # (I + D) z is 4-Lipschitz on 2-Lipschitz streams; halve it
        mask = draws.fusion_mask
        if mask is not None and mask.shape != z.shape:
            mask = T.expand(mask, z.shape)
        z = T.scale(z if mask is None else rani_apply(z, mask), 0.5)
    return z, outputs


def draw_block(block: HycasBlock, states: Sequence[NoiseState], index: int, hw: tuple,
               stochastic: bool = True) -> BlockDraws:
    """Randomness for one block; sites are keyed by block index so blocks draw independently."""
    shape = tuple(hw) + (block.out_channels,)
    omega = [s.omega_seed for s in states]
    masks: dict[str, Tensor | None] = {}
    for j, v in enumerate(STREAM_ORDER):
        rani = block.streams[v].rani
        masks[v] = rani_mask_tensor(rani, rani_draws(omega, 16 * index + j, shape, rani.stages)) \
            if stochastic else None
    psi = [s.psi_seed for s in states] if stochastic else [0]
    w_sn = draw_projection_filters(psi, 16 * index + 8, block.streams[RPFAN], hw).w_sn
    fusion = None
    if block.fusion_rani is not None and stochastic:
        fusion = rani_mask_tensor(block.fusion_rani,
                                  rani_draws(omega, 16 * index + 3, shape, block.fusion_rani.stages))
    return BlockDraws(masks, w_sn, fusion)


def block_forward(x: Tensor, block: HycasBlock, noise, block_index: int = 0) -> Tensor:
    """Fused block output z for one block under the given noise state(s)."""
    states = list(noise) if isinstance(noise, (list, tuple)) else [noise]
    draws = draw_block(block, states, block_index, (x.shape[1], x.shape[2]))
    return _block_forward(x, block, draws)[0]


# --------------------------------------------------------------------------
# construction


def build_network(input_shape: tuple = (8, 8, 1), num_classes: int = 2,
                  channels: Sequence[int] = (4, 4), *, kernel_size: int = 3,
                  cutoff_rho: float = 0.5, skip_beta: float = 1.0, fusion_rani: bool = False,
                  stages: int = 4, pi_batch: int = 8, fourier_guard: bool = True,
                  seed: int = 0) -> HycasNetwork:
    rng = np.random.default_rng(seed)
    h, w, cin = input_shape
    blocks = []
    for i, cout in enumerate(channels):
        streams = {
            v: make_stream(v, cin, cout, (h, w), rng, kernel_size=kernel_size, cutoff_rho=cutoff_rho,
                           skip_beta=skip_beta, stages=stages, pi_batch=pi_batch,
                           fourier_guard=fourier_guard, name=f"blocks.{i}.{v}.kernel")
            for v in STREAM_ORDER
        }
        fusion = RaniParams.init(cout, rng, stages=stages) if fusion_rani else None
        blocks.append(HycasBlock(streams, T.parameter(np.zeros((len(STREAM_ORDER), cout))), cin, cout, fusion))
        cin = cout
    feat = h * w * cin
    head_w = T.parameter(rng.standard_normal((num_classes, feat)) / np.sqrt(feat))
    head_b = T.parameter(np.zeros(num_classes))
    aux = {v: (T.parameter(rng.standard_normal((num_classes, cin)) / np.sqrt(cin)),
               T.parameter(np.zeros(num_classes))) for v in STREAM_ORDER}
    arch = dict(input_shape=tuple(input_shape), num_classes=num_classes, channels=tuple(channels),
                kernel_size=kernel_size, cutoff_rho=cutoff_rho, skip_beta=skip_beta,
                fusion_rani=fusion_rani, stages=stages, pi_batch=pi_batch,
                fourier_guard=fourier_guard, seed=seed)
    return HycasNetwork(tuple(input_shape), num_classes, blocks, head_w, head_b, aux, arch=arch)


# --------------------------------------------------------------------------
# Lipschitz accounting


def audit_kernels(net: HycasNetwork, tol: float = SPECTRAL_TOL) -> dict[str, float]:
    """Fourier operator norm per kernel; raises naming the first kernel above 1 + tol."""
    hw = net.input_shape[:2]
    norms = {}
    for k in net.kernels():
        s = spectral_norm_fourier(k, hw)
        norms[k.name] = s
        if s > 1.0 + tol:
            raise UnauditedKernelError(f"kernel {k.name} has operator norm {s:.6g} > 1")
    return norms


def head_spectral_norm(net: HycasNetwork) -> float:
    return float(np.linalg.norm(net.head_weight.data, 2))


def network_lip_bound(net: HycasNetwork) -> float:
    """Product of per-block bounds (2 each) times the head's largest singular value."""
    audit_kernels(net)
    bound = LIP_PER_BLOCK ** len(net.blocks) * head_spectral_norm(net)
    net.lip_bound = bound
    return bound


def calibrate(net: HycasNetwork) -> HycasNetwork:
    """Scale the head by gamma = min(1, 2 / L_net) so the network bound is at most 2."""
    bound = network_lip_bound(net)
    gamma = min(1.0, LIP_TARGET / bound) if bound > 0 else 1.0
    net.head_weight.data = net.head_weight.data * gamma
    net.head_bias.data = net.head_bias.data * gamma
    net.calibrator_gamma *= gamma
    net.lip_bound = bound * gamma
    return net


def require_calibrated(net: HycasNetwork, tol: float = 1e-9) -> float:
    bound = network_lip_bound(net)
    if bound > LIP_TARGET * (1.0 + tol):
        raise UncalibratedError(f"network Lipschitz bound {bound:.6g} exceeds {LIP_TARGET}")
    return bound


def parameter_count(net: HycasNetwork) -> int:
    return sum(p.data.size for p in net.named_parameters().values())


__all__ = [
    "HycasBlock", "HycasNetwork", "STREAM_ORDER", "SNCAN", "RPFAN", "FDPAN",
    "gate_weights", "block_forward", "build_network", "network_lip_bound", "calibrate",
    "require_calibrated", "audit_kernels", "UncalibratedError",
]
