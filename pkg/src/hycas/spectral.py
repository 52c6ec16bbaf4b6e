"""Deterministic 1-Lipschitz toolbox: kernel spectral norms, rescaling,
orthogonal channel mixers and the orthonormal 2-D DCT with low-pass masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import CIRCULAR, ZERO, Tensor, conv2d_adjoint_array, conv2d_array, parameter

EPSILON_GUARD = 1e-6
DEFAULT_PI_STEPS = 5
DEFAULT_PI_PROBES = 8


@dataclass
class KernelSpec:
    """A convolution kernel (kh, kw, Cin, Cout) plus its padding convention and last norm estimate."""

    weight: Tensor
    padding: str = CIRCULAR
    stride: int = 1
    sigma_hat: float | None = None
    epsilon_guard: float = EPSILON_GUARD
    name: str = ""

    def __post_init__(self):
        if not isinstance(self.weight, Tensor):
            self.weight = parameter(self.weight)
        if self.weight.ndim != 4:
            raise ValueError(f"kernel must be 4-D (kh, kw, Cin, Cout), got {self.weight.shape}")
        if self.padding not in (CIRCULAR, ZERO):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def K(self) -> np.ndarray:
        return self.weight.data

    @property
    def shape(self) -> tuple:
        return self.weight.shape


@dataclass
class OrthoMixer:
    U: np.ndarray
    seed: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.U.T

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y @ self.U


@dataclass
class DctMask:
    mask: np.ndarray
    cutoff_rho: float = field(default=0.5)


def _as_array(kernel) -> np.ndarray:
    return kernel.K if isinstance(kernel, KernelSpec) else np.asarray(kernel, dtype=np.float64)


def transfer_matrices(kernel, input_hw: tuple, half: bool = False) -> np.ndarray:
    """Per-frequency Cin x Cout transfer matrices of the circular convolution.

    Shape (..., H, W, Cin, Cout), or (..., H, W//2+1, Cin, Cout) with ``half``; for a real
    kernel the omitted frequencies are complex conjugates and carry the same singular values.
    """
    k = _as_array(kernel)
    h, w = input_hw
    kh, kw = k.shape[-4:-2]
    if h < kh or w < kw:
        raise ValueError(f"grid {h}x{w} smaller than kernel {kh}x{kw}")
    if half:
        return np.fft.rfft2(k, s=(h, w), axes=(-4, -3))
    return np.fft.fft2(k, s=(h, w), axes=(-4, -3))


def spectral_norm_fourier(kernel, input_hw: tuple) -> float | np.ndarray:
    """Exact operator norm of a stride-1 circular convolution.

    Accepts a single kernel or a stack (..., kh, kw, Cin, Cout); a stack yields one norm per kernel.
    """
    if isinstance(kernel, KernelSpec):
        if kernel.padding != CIRCULAR:
            raise ValueError("Fourier bound is only valid for circular padding")
        if kernel.stride != 1:
            raise ValueError("Fourier bound is only implemented for stride 1")
    f = transfer_matrices(kernel, input_hw, half=True)
    # largest eigenvalue of the smaller Gram matrix = squared top singular value
    if f.shape[-2] <= f.shape[-1]:
        gram = f @ np.conj(np.swapaxes(f, -1, -2))
    else:
        gram = np.conj(np.swapaxes(f, -1, -2)) @ f
    lam = np.linalg.eigvalsh(gram)[..., -1]
    top = np.sqrt(np.maximum(lam.max(axis=(-2, -1)), 0.0))
    return float(top) if np.ndim(top) == 0 else top


def spectral_norm_power_iter(kernel, input_hw: tuple, T: int = DEFAULT_PI_STEPS, seed: int = 0,
                             padding: str | None = None, stride: int | None = None,
                             probes: int = DEFAULT_PI_PROBES) -> float:
    """T-step power-iteration estimate <u_T, K v_T> of the convolution's operator norm.

    ``probes`` independent Gaussian starts are iterated side by side and the largest
    quotient is returned; every probe is a lower bound, so the maximum is too.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    k = _as_array(kernel)
    if isinstance(kernel, KernelSpec):
        padding = kernel.padding if padding is None else padding
        stride = kernel.stride if stride is None else stride
    padding = padding or CIRCULAR
    stride = stride or 1
    h, w = input_hw
    cout = k.shape[-1]
    ho, wo = -(-h // stride), -(-w // stride)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((probes, ho, wo, cout))
    u /= _per_sample_norm(u)
    v = None
    for _ in range(T):
        v = conv2d_adjoint_array(u, k, (h, w), padding, stride)
        v /= np.maximum(_per_sample_norm(v), 1e-300)
        u = conv2d_array(v, k, padding, stride)
        u /= np.maximum(_per_sample_norm(u), 1e-300)
    quotients = (u * conv2d_array(v, k, padding, stride)).sum(axis=(1, 2, 3))
    return float(quotients.max())


def rescale_kernel(kernel: KernelSpec) -> KernelSpec:
    """In-place K <- K / (max(sigma_hat, 1) + guard); returns the same spec."""
    if kernel.sigma_hat is None:
        raise ValueError(f"kernel {kernel.name or ''} has no spectral-norm estimate")
    kernel.weight.data = kernel.weight.data / (max(kernel.sigma_hat, 1.0) + kernel.epsilon_guard)
    return kernel


def normalize_kernel(kernel: KernelSpec, input_hw: tuple, method: str = "fourier",
                     T: int = DEFAULT_PI_STEPS, seed: int = 0) -> float:
    """Estimate sigma with the chosen estimator, rescale, and return the pre-rescale estimate."""
    if method == "fourier":
        kernel.sigma_hat = spectral_norm_fourier(kernel, input_hw)
    elif method == "power":
        kernel.sigma_hat = spectral_norm_power_iter(kernel, input_hw, T, seed)
    else:
        raise ValueError(f"unknown estimator {method!r}")
    sigma = kernel.sigma_hat
    rescale_kernel(kernel)
    return sigma


def _per_sample_norm(a: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, a.ndim))
    return np.sqrt((a * a).sum(axis=axes, keepdims=True))


def circular_operator(w0: np.ndarray, in_hw: tuple, half: bool = False) -> np.ndarray:
    """Frequency response T with FFT(conv2d_array(x, k)) = FFT(x) @ T for circular stride-1 convs.

    ``half`` keeps only the non-negative frequencies of the last spatial axis (rfft layout).
    """
    h, w = in_hw
    kh, kw = w0.shape[-4:-2]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    fw = np.fft.rfftfreq(w) if half else np.fft.fftfreq(w)
    shift = np.exp(-2j * np.pi * (np.fft.fftfreq(h)[:, None] * ph + fw[None, :] * pw))
    spec = np.fft.rfft2(w0, s=(h, w), axes=(-4, -3)) if half else np.fft.fft2(w0, s=(h, w), axes=(-4, -3))
    return np.conj(spec) * shift[:, :, None, None]


def batch_aware_rayleigh(w0: np.ndarray, u: np.ndarray, in_hw: tuple, padding: str = CIRCULAR,
                         stride: int = 1, steps: int = 2) -> np.ndarray:
    """Batch-aware Rayleigh quotients for a stack of kernels.

    ``w0`` is (D, kh, kw, Cin, Cout) and ``u`` the starting draws (D, N, Ho, Wo, Cout).
    Each of the N probes is normalised independently; the quotient is averaged over N.
    """
    d, n = u.shape[:2]
    if padding == CIRCULAR and stride == 1:
        return _rayleigh_fourier(w0, u, in_hw, steps)
    h, w = in_hw
    # fold the probe axis into the batch axis and repeat kernels per probe
    kr = np.repeat(w0, n, axis=0)
    uf = u.reshape((d * n,) + u.shape[2:])
    vf = None
    for _ in range(steps):
        vf = conv2d_adjoint_array(uf, kr, (h, w), padding, stride)
        vf = vf / np.maximum(_per_sample_norm(vf), 1e-300)
        uf = conv2d_array(vf, kr, padding, stride)
        uf = uf / np.maximum(_per_sample_norm(uf), 1e-300)
    kv = conv2d_array(vf, kr, padding, stride)
    return (uf * kv).reshape(d, n, -1).sum(axis=-1).mean(axis=1)


def _rayleigh_fourier(w0: np.ndarray, u: np.ndarray, in_hw: tuple, steps: int) -> np.ndarray:
    # same iteration as the spatial path, carried out per frequency on the half spectrum;
    # norms via Parseval with the mirrored columns counted twice
    d, n = u.shape[:2]
    h, w = in_hw
    wf = w // 2 + 1
    weight = np.full(wf, 2.0)
    weight[0] = 1.0
    if w % 2 == 0:
        weight[-1] = 1.0
    weight = np.tile(weight, h)[None, :, None, None] / (h * w)
    t = circular_operator(w0, in_hw, half=True).reshape(d, h * wf, w0.shape[-2], w0.shape[-1])
    th = np.conj(np.swapaxes(t, -1, -2))

    def norm(a):
        return np.sqrt(((a.real ** 2 + a.imag ** 2) * weight).sum(axis=(1, 3), keepdims=True))

    # layout (D, freq, N, C) so the channel contraction is a batched matmul
    uh = np.fft.rfft2(u, axes=(2, 3)).reshape(d, n, h * wf, -1).transpose(0, 2, 1, 3)
    uh = uh / np.maximum(norm(uh), 1e-300)
    vh = None
    for _ in range(steps):
        vh = uh @ th
        vh = vh / np.maximum(norm(vh), 1e-300)
        uh = vh @ t
        uh = uh / np.maximum(norm(uh), 1e-300)
    kv = vh @ t
    rq = ((np.conj(uh) * kv).real * weight).sum(axis=(1, 3))
    return rq.mean(axis=1)


def batch_aware_spectral_norm(w0, batch_shape: tuple, seed: int = 0, padding: str = CIRCULAR,
                              stride: int = 1) -> tuple[float, KernelSpec]:
    """Two-step per-sample power iteration; returns (RQ, W0 / max(RQ, 1))."""
    k = _as_array(w0)
    n, ho, wo, cout = batch_shape
    if n < 1:
        raise ValueError("batch size N must be >= 1")
    if cout != k.shape[-1]:
        raise ValueError(f"probe channels {cout} vs kernel Cout {k.shape[-1]}")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((1, n, ho, wo, cout))
    rq = float(batch_aware_rayleigh(k[None], u, (ho * stride, wo * stride), padding, stride)[0])
    return rq, KernelSpec(k / max(rq, 1.0), padding=padding, stride=stride, sigma_hat=rq)


def make_orthogonal_mixer(C: int, seed: int) -> OrthoMixer:
    """Orthogonal C x C matrix from a seeded Gaussian via QR with sign fixing."""
    if C < 1:
        raise ValueError("C must be >= 1")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((C, C)))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return OrthoMixer(q, seed)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix D with coefficients = D @ signal."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


def dct2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return dct_matrix(h) @ x @ dct_matrix(w).T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    h, w = c.shape[-2:]
    return dct_matrix(h).T @ c @ dct_matrix(w)


def lowpass_mask(H: int, W: int, cutoff_rho: float = 0.5) -> DctMask:
    """Keep the lowest ceil(rho*H) x ceil(rho*W) DCT frequencies."""
    if not 0.0 <= cutoff_rho <= 1.0:
        raise ValueError(f"cutoff_rho must lie in [0, 1], got {cutoff_rho}")
    m = np.zeros((H, W))
    m[:math.ceil(cutoff_rho * H), :math.ceil(cutoff_rho * W)] = 1.0
    return DctMask(m, cutoff_rho)


def lowpass_projector(H: int, W: int, cutoff_rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-space factors (P_h, P_w) with idct2(mask * dct2(x)) == P_h @ x @ P_w.T.

    The block-shaped mask factorises as an outer product of 1-D masks, so the
    projection is separable.
    """
    kh, kw = math.ceil(cutoff_rho * H), math.ceil(cutoff_rho * W)
    dh, dw = dct_matrix(H), dct_matrix(W)
    ph = dh[:kh].T @ dh[:kh]
    pw = dw[:kw].T @ dw[:kw]
    return ph, pw
