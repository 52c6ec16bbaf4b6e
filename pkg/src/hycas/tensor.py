"""Minimal dense-tensor engine with reverse-mode differentiation.

Feature maps are NHWC, all data is float64.  Every primitive records its
parents and a backward closure when at least one input requires a gradient;
:func:`backward` replays the record in reverse execution order.

Shapes never broadcast implicitly.  Per-channel vectors and shared noise
must be widened with :func:`expand` / :func:`expand_channels` first.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()

CIRCULAR = "circular"
ZERO = "zero"


class ShapeError(ValueError):
    """Raised when operand shapes do not match an operation's contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._order = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op, tuple(parents), backward_fn)
    return Tensor(data, False, op)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(b)
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, "hadamard", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for overflow-free evaluation
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clip01(a: Tensor) -> Tensor:
    """Psi(u) = min(1, max(0, u)); gradient passes only strictly inside (0, 1)."""
    x = a.data
    inside = (x > 0.0) & (x < 1.0)
    return _make(np.clip(x, 0.0, 1.0), "clip01", (a,), lambda g: (g * inside,))


def groupsort2(a: Tensor) -> Tensor:
    """MaxMin activation: sort each disjoint channel pair ascending (min, max)."""
    c = a.shape[-1]
    if c % 2:
        raise ShapeError(f"groupsort2: channel count must be even, got {c}")
    x = a.data.reshape(a.shape[:-1] + (c // 2, 2))
    swap = x[..., 0] > x[..., 1]
    out = x.copy()
    out[swap] = x[swap][:, ::-1]

    def bw(g):
        g = g.reshape(x.shape).copy()
        g[swap] = g[swap][:, ::-1]
        return (g.reshape(a.shape),)

    return _make(out.reshape(a.shape), "groupsort2", (a,), bw)


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch for the elementwise primitive family."""
    table = {
        "relu": relu,
        "sigmoid": sigmoid,
        "groupsort2": groupsort2,
        "add": add,
        "hadamard": hadamard,
        "scale": scale,
        "clip01": clip01,
    }
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


# --------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def expand(a: Tensor, shape: tuple) -> Tensor:
    """Explicitly broadcast ``a`` to ``shape`` (size-1 or missing leading axes only)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        return (g.sum(axis=axes).reshape(src),)

    return _make(np.ascontiguousarray(out), "expand", (a,), bw)


def expand_channels(v: Tensor, shape: tuple) -> Tensor:
    """Widen a per-channel (C,) or per-sample (N, C) vector to NHWC ``shape``."""
    if v.ndim == 1:
        if v.shape[0] != shape[-1]:
            raise ShapeError(f"expand_channels: {v.shape} vs channels {shape[-1]}")
        return expand(v, shape)
    if v.ndim == 2:
        if v.shape != (shape[0], shape[-1]):
            raise ShapeError(f"expand_channels: {v.shape} vs {(shape[0], shape[-1])}")
        return expand(reshape(v, (shape[0], 1, 1, shape[-1])), shape)
    raise ShapeError(f"expand_channels: expected 1-D or 2-D vector, got {v.shape}")


def take(a: Tensor, index: int) -> Tensor:
    """Select ``a[index]`` along the leading axis."""
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), "take", (a,), bw)


def matmul_last(a: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``a`` with the rows of ``w``: a @ w."""
    if a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul_last: {a.shape} @ {w.shape}")
    ad, wd = a.data, w.data

    def bw(g):
        gw = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return g @ wd.T, gw

    return _make(ad @ wd, "matmul_last", (a, w), bw)


def spatial_linear(a: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Per-channel plane transform ``left @ X @ right.T`` on the H, W axes of NHWC."""
    if a.ndim != 4 or left.shape[1] != a.shape[1] or right.shape[1] != a.shape[2]:
        raise ShapeError(f"spatial_linear: {a.shape} with {left.shape}, {right.shape}")
    out = np.einsum("ih,nhwc,jw->nijc", left, a.data, right, optimize=True)

    def bw(g):
        return (np.einsum("ih,nijc,jw->nhwc", left, g, right, optimize=True),)

    return _make(out, "spatial_linear", (a,), bw)


# --------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, kh: int, kw: int, padding: str) -> np.ndarray:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    widths = ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0))
    if padding == CIRCULAR:
        return np.pad(x, widths, mode="wrap")
    if padding == ZERO:
        return np.pad(x, widths)
    raise ValueError(f"unknown padding {padding!r}")


def _unpad(gp: np.ndarray, h: int, w: int, kh: int, kw: int, padding: str) -> np.ndarray:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if padding == CIRCULAR:
        gp = gp.copy()
        # fold wrapped border rows/cols back onto their source positions
        top, bottom = ph, kh - 1 - ph
        if top:
            gp[:, h:h + top] += gp[:, :top]
        if bottom:
            gp[:, top:top + bottom] += gp[:, top + h:]
        gp = gp[:, top:top + h]
        left, right = pw, kw - 1 - pw
        if left:
            gp[:, :, w:w + left] += gp[:, :, :left]
        if right:
            gp[:, :, left:left + right] += gp[:, :, left + w:]
        return gp[:, :, left:left + w]
    return gp[:, ph:ph + h, pw:pw + w]


def _patches(x: np.ndarray, kh: int, kw: int, padding: str, stride: int) -> np.ndarray:
    if kh == 1 and kw == 1:
        return x[:, ::stride, ::stride]
    xp = _pad(x, kh, kw, padding)
    n, _, _, c = x.shape
    ho, wo = -(-x.shape[1] // stride), -(-x.shape[2] // stride)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (N, Hp-kh+1, Wp-kw+1, C, kh, kw)
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho, wo, kh * kw * c)


def conv2d_array(x: np.ndarray, k: np.ndarray, padding: str = CIRCULAR, stride: int = 1) -> np.ndarray:
    """Cross-correlation of NHWC ``x`` with ``k`` (kh, kw, Cin, Cout) or per-sample (N, kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = k.shape[-4:]
    cols = _patches(x, kh, kw, padding, stride)
    n, ho, wo, kk = cols.shape
    if k.ndim == 4:
        return (cols.reshape(-1, kk) @ k.reshape(kk, cout)).reshape(n, ho, wo, cout)
    return np.matmul(cols.reshape(n, ho * wo, kk), k.reshape(n, kk, cout)).reshape(n, ho, wo, cout)


def conv2d_adjoint_array(g: np.ndarray, k: np.ndarray, in_hw: tuple, padding: str = CIRCULAR,
                         stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`conv2d_array` with respect to its input."""
    kh, kw, cin, cout = k.shape[-4:]
    n, ho, wo, _ = g.shape
    h, w = in_hw
    if k.ndim == 4:
        gc = g.reshape(-1, cout) @ k.reshape(-1, cout).T
    else:
        gc = np.matmul(g.reshape(n, ho * wo, cout), k.reshape(n, -1, cout).transpose(0, 2, 1))
    gc = gc.reshape(n, ho, wo, kh, kw, cin)
    gp = np.zeros((n, h + kh - 1, w + kw - 1, cin))
    for a in range(kh):
        for b in range(kw):
            gp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += gc[:, :, :, a, b]
    return _unpad(gp, h, w, kh, kw, padding)


def conv2d(x: Tensor, kernel, padding: str | None = None, stride: int | None = None) -> Tensor:
    """Differentiable NHWC convolution.

    ``kernel`` may be a :class:`~hycas.spectral.KernelSpec` (padding and stride are
    then taken from it), a Tensor, or a plain array.
    """
    if hasattr(kernel, "weight"):
        padding = kernel.padding if padding is None else padding
        stride = kernel.stride if stride is None else stride
        kernel = kernel.weight
    kernel = _wrap(kernel)
    padding = CIRCULAR if padding is None else padding
    stride = 1 if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NHWC, got shape {x.shape}")
    k = kernel.data
    if k.ndim not in (4, 5):
        raise ShapeError(f"conv2d: kernel must be (kh, kw, Cin, Cout), got {k.shape}")
    if k.shape[-2] != x.shape[-1]:
        raise ShapeError(f"conv2d: kernel expects Cin={k.shape[-2]} but input has C={x.shape[-1]}")
    if k.ndim == 5 and k.shape[0] != x.shape[0]:
        raise ShapeError(f"conv2d: per-sample kernel batch {k.shape[0]} vs input batch {x.shape[0]}")
    kh, kw, cin, cout = k.shape[-4:]
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]}")
    xd = x.data
    cols = _patches(xd, kh, kw, padding, stride)
    n, ho, wo, kk = cols.shape
    if k.ndim == 4:
        out = (cols.reshape(-1, kk) @ k.reshape(kk, cout)).reshape(n, ho, wo, cout)
    else:
        out = np.matmul(cols.reshape(n, ho * wo, kk), k.reshape(n, kk, cout)).reshape(n, ho, wo, cout)

    def bw(g):
        gx = conv2d_adjoint_array(g, k, xd.shape[1:3], padding, stride) if x.requires_grad else None
        if not kernel.requires_grad:
            return gx, None
        if k.ndim == 4:
            gk = (cols.reshape(-1, kk).T @ g.reshape(-1, cout)).reshape(k.shape)
        else:
            gk = np.matmul(cols.reshape(n, ho * wo, kk).transpose(0, 2, 1),
                           g.reshape(n, ho * wo, cout)).reshape(k.shape)
        return gx, gk

    return _make(out, "conv2d", (x, kernel), bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    weight = _wrap(weight)
    xd = x.data.reshape(x.shape[0], -1) if x.ndim > 2 else x.data
    if x.ndim == 1:
        xd = x.data.reshape(1, -1)
    if weight.shape[1] != xd.shape[1]:
        raise ShapeError(f"dense: weight has {weight.shape[1]} columns, input length {xd.shape[1]}")
    wd = weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"dense: bias shape {bias.shape} vs {(wd.shape[0],)}")
        out = out + bias.data
        parents.append(bias)
    if x.ndim == 1:
        out = out[0]
    xshape = x.shape

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        grads = [(g2 @ wd).reshape(xshape), g2.T @ xd]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, "dense", parents, bw)


# --------------------------------------------------------------------------
# reductions


def gap(x: Tensor) -> Tensor:
    """Global average pool over H, W of an NHWC map -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"gap: expected NHWC, got {x.shape}")
    n, h, w, c = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(1, 2)), "gap", (x,), bw)


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.array(x.data.mean()), "mean", (x,), lambda g: (np.full(shape, float(g) / n),))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, "softmax", (x,), bw)


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_crossentropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer class targets."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_crossentropy: expected (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"softmax_crossentropy: {t.shape[0]} targets for {n} rows")
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"softmax_crossentropy: target index out of range [0, {k})")
    logp = log_softmax_array(logits.data)
    loss = -logp[np.arange(n), t].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        return (d * (float(g) / n),)

    return _make(np.array(loss), "softmax_crossentropy", (logits,), bw)


def reduce(kind: str, x: Tensor, target=None) -> Tensor:
    """Dispatch for the reduction primitive family."""
    if kind == "gap":
        return gap(x)
    if kind == "sum":
        return tsum(x)
    if kind == "mean":
        return mean(x)
    if kind == "softmax_crossentropy":
        return softmax_crossentropy(x, target)
    raise ValueError(f"unknown reduce kind {kind!r}")


# --------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Returns the recorded operations in the order the reverse sweep visited them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._order, reverse=True)
    grads = {id(loss): np.ones(loss.shape)}
    visited = []
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        visited.append(t)
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return visited


def grad_of(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``fn`` at ``x`` (input treated as a fresh leaf)."""
    t = parameter(x)
    out = fn(t)
    backward(out)
    return out.item(), (t.grad if t.grad is not None else np.zeros_like(t.data))
