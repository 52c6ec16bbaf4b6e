"""The three Lipschitz-bounded stochastic streams and the RANI mask generator.

Every stream has the shape ``G(x) = beta * H(x) + M * H(x)`` where ``H`` is a
1-Lipschitz core and ``M`` a data-independent mask in [0, 1]; with beta <= 1
the stream is at most 2-Lipschitz for every fixed noise draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .noise import NoiseState
from .spectral import (
    DctMask,
    KernelSpec,
    OrthoMixer,
    batch_aware_rayleigh,
    lowpass_projector,
    spectral_norm_fourier,
)
from .tensor import CIRCULAR, Tensor

SNCAN = "SNCAN"
RPFAN = "RPFAN"
FDPAN = "FDPAN"
VARIANTS = (FDPAN, SNCAN, RPFAN)

SPECTRAL_TOL = 1e-6


class UnauditedKernelError(ValueError):
    """A kernel's operator norm exceeds 1 + tolerance."""


@dataclass
class RaniParams:
    """Trainable parameters of one RANI site (local and channel attention plus noise scales)."""

    local_conv: Tensor  # (1, 1, C, C)
    local_bias: Tensor  # (C,)
    ca_dense1: Tensor  # (hidden, C)
    ca_bias1: Tensor
    ca_dense2: Tensor  # (C, hidden)
    ca_bias2: Tensor
    sigma_g: Tensor  # (C,)
    sigma_l: Tensor  # (C,)
    stages: int = 4

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")

    @property
    def channels(self) -> int:
        return self.sigma_g.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "local_conv": self.local_conv, "local_bias": self.local_bias,
            "ca_dense1": self.ca_dense1, "ca_bias1": self.ca_bias1,
            "ca_dense2": self.ca_dense2, "ca_bias2": self.ca_bias2,
            "sigma_g": self.sigma_g, "sigma_l": self.sigma_l,
        }

    @classmethod
    def init(cls, C: int, rng: np.random.Generator, stages: int = 4, bias: float = 2.0,
             noise_scale: float = 0.3) -> "RaniParams":
        hidden = max(1, C // 2)
        return cls(
            local_conv=T.parameter(rng.standard_normal((1, 1, C, C)) / np.sqrt(C)),
            local_bias=T.parameter(np.full(C, bias)),
            ca_dense1=T.parameter(rng.standard_normal((hidden, C)) / np.sqrt(C)),
            ca_bias1=T.parameter(np.zeros(hidden)),
            ca_dense2=T.parameter(rng.standard_normal((C, hidden)) / np.sqrt(hidden)),
            ca_bias2=T.parameter(np.full(C, bias)),
            sigma_g=T.parameter(np.full(C, noise_scale)),
            sigma_l=T.parameter(np.full(C, noise_scale)),
            stages=stages,
        )


@dataclass
class StreamParams:
    variant: str
    in_channels: int
    out_channels: int
    rani: RaniParams
    kernels: list[KernelSpec] = field(default_factory=list)
    mixer: OrthoMixer | None = None
    mask: DctMask | None = None
    skip_beta: float = 1.0
    kernel_size: int = 3
    pi_batch: int = 8
    fourier_guard: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown stream variant {self.variant!r}")
        if not 0.0 < self.skip_beta <= 1.0:
            raise ValueError("skip_beta must lie in (0, 1]")


# --------------------------------------------------------------------------
# RANI


@dataclass
class RaniDraws:
    """Gaussian surrogates and raw noise for D mask draws at one site."""

    surrogate: np.ndarray  # (D, stages, H, W, C)
    eta_g: np.ndarray  # (D, stages, C)
    eta_l: np.ndarray  # (D, stages, C)


def rani_draws(omega_seeds: Sequence[int], site: int, shape: tuple, stages: int) -> RaniDraws:
    h, w, c = shape
    d = len(omega_seeds)
    z = np.empty((d, stages, h, w, c))
    eg = np.empty((d, stages, c))
    el = np.empty((d, stages, c))
    for i, seed in enumerate(omega_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), site]))
        buf = rng.standard_normal(stages * (h * w * c + 2 * c))
        z[i] = buf[:stages * h * w * c].reshape(stages, h, w, c)
        rest = buf[stages * h * w * c:].reshape(2, stages, c)
        eg[i], el[i] = rest
    return RaniDraws(z, eg, el)


def _self_modulate(eta: Tensor, sigma: Tensor) -> Tensor:
    # eta <- eta * (sigma + eta * sigma), run twice
    for _ in range(2):
        eta = T.hadamard(eta, T.add(sigma, T.hadamard(eta, sigma)))
    return eta


def rani_mask_tensor(params: RaniParams, draws: RaniDraws) -> Tensor:
    """Differentiable mask (D, H, W, C) in [0, 1]; depends on the draws and parameters only."""
    d, stages, h, w, c = draws.surrogate.shape
    if c != params.channels:
        raise T.ShapeError(f"RANI params have {params.channels} channels, mask needs {c}")
    shape = (d, h, w, c)
    sg = T.expand(params.sigma_g, (d, c))
    sl = T.expand(params.sigma_l, (d, c))
    mask = None
    for j in range(min(stages, params.stages)):
        z = T.constant(draws.surrogate[:, j])
        local = T.sigmoid(T.add(T.conv2d(z, params.local_conv),
                                T.expand_channels(params.local_bias, shape)))
        hidden = T.relu(T.dense(T.gap(z), params.ca_dense1, params.ca_bias1))
        chan = T.sigmoid(T.dense(hidden, params.ca_dense2, params.ca_bias2))
        eta_g = _self_modulate(T.constant(draws.eta_g[:, j]), sg)
        eta_l = _self_modulate(T.constant(draws.eta_l[:, j]), sl)
        gamma_g = T.expand_channels(T.add(eta_g, chan), shape)
        gamma_l = T.add(T.expand_channels(eta_l, shape), local)
        stage = T.hadamard(T.clip01(gamma_g), T.clip01(gamma_l))
        mask = stage if mask is None else T.hadamard(mask, stage)
    return mask


def rani_mask(shape: tuple, params: RaniParams, omega_seed: int, site: int = 0) -> np.ndarray:
    """Mask M in [0, 1]^(H, W, C) for a single omega seed."""
    draws = rani_draws([omega_seed], site, shape, params.stages)
    return rani_mask_tensor(params, draws).data[0]


def rani_apply(h: Tensor, mask, beta: float = 1.0) -> Tensor:
    """Residual form (beta * I + diag(M)) h."""
    mask = mask if isinstance(mask, Tensor) else T.constant(mask)
    if mask.shape != h.shape:
        if mask.ndim == h.ndim and mask.shape[0] == 1 and mask.shape[1:] == h.shape[1:]:
            mask = T.expand(mask, h.shape)
        elif mask.shape == h.shape[1:]:
            mask = T.expand(mask, h.shape)
        else:
            raise T.ShapeError(f"rani_apply: mask {mask.shape} vs features {h.shape}")
    base = h if beta == 1.0 else T.scale(h, beta)
    return T.add(base, T.hadamard(mask, h))


# --------------------------------------------------------------------------
# random-projection filters


@dataclass
class ProjectionDraws:
    w0: np.ndarray  # (D, kh, kw, Cin, Cout) raw filters
    w_sn: np.ndarray  # (D, kh, kw, Cin, Cout) after batch-aware normalisation (and guard)
    rq: np.ndarray  # (D,)


def draw_projection_filters(psi_seeds: Sequence[int], site: int, params: StreamParams,
                            in_hw: tuple) -> ProjectionDraws:
    k, cin, cout = params.kernel_size, params.in_channels, params.out_channels
    h, w = in_hw
    d = len(psi_seeds)
    n = params.pi_batch
    w0 = np.empty((d, k, k, cin, cout))
    u = np.empty((d, n, h, w, cout))
    for i, seed in enumerate(psi_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), site]))
        w0[i] = rng.standard_normal((k, k, cin, cout)) / np.sqrt(k * k * cin)
        u[i] = rng.standard_normal((n, h, w, cout))
    rq = batch_aware_rayleigh(w0, u, in_hw, CIRCULAR, 1, steps=2)
    w_sn = w0 / np.maximum(rq, 1.0)[:, None, None, None, None]
    if params.fourier_guard:
        exact = np.atleast_1d(spectral_norm_fourier(w_sn, in_hw))
        w_sn = w_sn / np.maximum(exact, 1.0)[:, None, None, None, None]
    return ProjectionDraws(w0, w_sn, rq)


def jl_projection(x: np.ndarray, params: StreamParams, psi_seed: int, site: int = 0) -> np.ndarray:
    """Raw (pre-normalisation) random projection, rescaled so E||z||^2 = ||x||^2."""
    draws = draw_projection_filters([psi_seed], site, params, x.shape[1:3])
    z = T.conv2d_array(x, draws.w0[0], CIRCULAR)
    return z * np.sqrt(params.in_channels / params.out_channels)


def rpfan_jl_check(params: StreamParams, point_set: np.ndarray, epsilon_jl: float,
                   psi_seed: int = 0) -> float:
    """Fraction of point pairs whose projected squared distance lies in the JL band."""
    pts = np.asarray(point_set, dtype=np.float64)
    if pts.shape[0] < 2:
        raise ValueError("need at least two points")
    z = jl_projection(pts, params, psi_seed)
    n = pts.shape[0]
    inside = 0
    total = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = float(((pts[i] - pts[j]) ** 2).sum())
            dz = float(((z[i] - z[j]) ** 2).sum())
            total += 1
            inside += (1 - epsilon_jl) * dx <= dz <= (1 + epsilon_jl) * dx
    return inside / total


# --------------------------------------------------------------------------
# stream forward passes


def _expand_mask(mask: Tensor, shape: tuple) -> Tensor:
    return mask if mask.shape == shape else T.expand(mask, shape)


def _core(x: Tensor, params: StreamParams, w_sn: np.ndarray | None) -> Tensor:
    """The 1-Lipschitz deterministic core H of a stream."""
    if params.variant == SNCAN:
        return T.conv2d(x, params.kernels[0])
    if params.variant == RPFAN:
        xu = T.matmul_last(x, T.constant(params.mixer.U.T))
        k = w_sn[0] if w_sn.shape[0] == 1 else w_sn
        return T.conv2d(xu, T.constant(k), CIRCULAR, 1)
    h, w = x.shape[1:3]
    ph, pw = lowpass_projector(h, w, params.mask.cutoff_rho)
    xf = T.spatial_linear(x, ph, pw)
    xu = T.matmul_last(xf, T.constant(params.mixer.U.T))
    return T.conv2d(xu, params.kernels[0])


def stream_forward(x: Tensor, params: StreamParams, mask: Tensor | None,
                   w_sn: np.ndarray | None = None, core_only: bool = False) -> Tensor:
    """Stream output from pre-drawn randomness; ``mask`` may be (1, H, W, C) or per-sample."""
    h = _core(x, params, w_sn)
    if core_only or mask is None:
        return h
    beta = params.skip_beta if params.variant == FDPAN else 1.0
    return rani_apply(h, _expand_mask(mask, h.shape), beta)


def _as_list(noise) -> list[NoiseState]:
    return list(noise) if isinstance(noise, (list, tuple)) else [noise]


def _forward_with_noise(x: Tensor, params: StreamParams, noise, site: int = 0) -> Tensor:
    states = _as_list(noise)
    shape = (x.shape[1], x.shape[2], params.out_channels)
    draws = rani_draws([s.omega_seed for s in states], site, shape, params.rani.stages)
    mask = rani_mask_tensor(params.rani, draws)
    w_sn = None
    if params.variant == RPFAN:
        w_sn = draw_projection_filters([s.psi_seed for s in states], site, params, x.shape[1:3]).w_sn
    return stream_forward(x, params, mask, w_sn)


def _require(params: StreamParams, variant: str) -> None:
    if params.variant != variant:
        raise ValueError(f"expected {variant} parameters, got {params.variant}")


def sncan_forward(x: Tensor, params: StreamParams, noise) -> Tensor:
    """(I + D_omega) C_K(x)."""
    _require(params, SNCAN)
    return _forward_with_noise(x, params, noise)


def rpfan_forward(x: Tensor, params: StreamParams, noise) -> Tensor:
    """(I + D_omega) Conv(U x; W_SN) with W_SN drawn from the psi seed."""
    _require(params, RPFAN)
    return _forward_with_noise(x, params, noise)


def fdpan_forward(x: Tensor, params: StreamParams, noise) -> Tensor:
    """beta * H(x) + D_omega H(x) with H = conv . mixer . idct . lowpass . dct."""
    _require(params, FDPAN)
    return _forward_with_noise(x, params, noise)


def audit_stream_kernels(params: StreamParams, in_hw: tuple, tol: float = SPECTRAL_TOL) -> dict[str, float]:
    """Fourier operator norm of every owned kernel; raises if any exceeds 1 + tol."""
    norms = {}
    for k in params.kernels:
        s = spectral_norm_fourier(k, in_hw)
        norms[k.name] = s
        if s > 1.0 + tol:
            raise UnauditedKernelError(f"kernel {k.name or params.variant} has operator norm {s:.6g} > 1")
    return norms


def make_stream(variant: str, in_channels: int, out_channels: int, in_hw: tuple,
                rng: np.random.Generator, *, kernel_size: int = 3, cutoff_rho: float = 0.5,
                skip_beta: float = 1.0, stages: int = 4, pi_batch: int = 8,
                fourier_guard: bool = True, kernel: KernelSpec | None = None,
                mixer_seed: int | None = None, name: str = "") -> StreamParams:
    """Build stream parameters with every owned kernel spectrally normalised.

    A caller-supplied ``kernel`` must already satisfy the operator-norm audit.
    """
    from .spectral import lowpass_mask, make_orthogonal_mixer, normalize_kernel

    rani = RaniParams.init(out_channels, rng, stages=stages)
    kernels: list[KernelSpec] = []
    mixer = mask = None
    if variant in (SNCAN, FDPAN):
        if kernel is None:
            w = rng.standard_normal((kernel_size, kernel_size, in_channels, out_channels))
            kernel = KernelSpec(w / np.sqrt(kernel_size * kernel_size * in_channels), name=name)
            normalize_kernel(kernel, in_hw, "fourier")
        else:
            s = spectral_norm_fourier(kernel, in_hw)
            if s > 1.0 + SPECTRAL_TOL:
                raise UnauditedKernelError(
                    f"kernel {kernel.name or variant} has operator norm {s:.6g}; rescale it first")
        kernels.append(kernel)
    if variant in (RPFAN, FDPAN):
        seed = int(rng.integers(0, 2**32)) if mixer_seed is None else mixer_seed
        mixer = make_orthogonal_mixer(in_channels, seed)
    if variant == FDPAN:
        mask = lowpass_mask(in_hw[0], in_hw[1], cutoff_rho)
    return StreamParams(variant, in_channels, out_channels, rani, kernels, mixer, mask,
                        skip_beta=skip_beta, kernel_size=kernel_size, pi_batch=pi_batch,
                        fourier_guard=fourier_guard)
