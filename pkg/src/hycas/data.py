"""HYD1 dataset files and the synthetic blob/stripe image generator."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HYD1"
HEADER = struct.Struct("<4s5I")
PATTERNS = ("blob-stripe", "quadrant")


class DatasetFormatError(ValueError):
    pass


def write_dataset(path, x: np.ndarray, y: np.ndarray, num_classes: int) -> None:
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4:
        raise ValueError(f"expected (count, H, W, C) images, got {x.shape}")
    count, h, w, c = x.shape
    if y.shape != (count,):
        raise ValueError("one label per image required")
    if count and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError("label out of range")
    if count and not np.all((x >= 0) & (x <= 1)):
        raise ValueError("pixel values must lie in [0, 1]")
    rec = np.dtype([("px", "<f4", (h * w * c,)), ("label", "<u4")])
    body = np.empty(count, dtype=rec)
    body["px"] = x.reshape(count, h * w * c)
    body["label"] = y
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, count, h, w, c, num_classes))
        f.write(body.tobytes())


def read_dataset(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Returns (images as float64 NHWC, labels, num_classes)."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetFormatError("file shorter than header")
    magic, count, h, w, c, k = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    expected = HEADER.size + count * (4 * h * w * c + 4)
    if len(raw) != expected:
        raise DatasetFormatError(f"size {len(raw)} bytes, header implies {expected}")
    rec = np.dtype([("px", "<f4", (h * w * c,)), ("label", "<u4")])
    body = np.frombuffer(raw, dtype=rec, offset=HEADER.size, count=count)
    x = body["px"].astype(np.float64).reshape(count, h, w, c)
    y = body["label"].astype(np.int64)
    if count and y.max() >= k:
        raise DatasetFormatError("label out of range")
    return x, y, int(k)


def _blob(rng, hw, center=None, amp=0.8, width=1.3):
    h, w = hw
    cy, cx = center if center is not None else (rng.uniform(1.5, h - 2.5), rng.uniform(1.5, w - 2.5))
    yy, xx = np.mgrid[0:h, 0:w]
    return amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))


def _stripe(rng, hw, amp=0.7):
    # alternating lines two pixels apart, random phase and orientation
    h, w = hw
    img = np.zeros(hw)
    phase = int(rng.integers(0, 2))
    if rng.random() < 0.5:
        img[phase::2, :] = amp
    else:
        img[:, phase::2] = amp
    return img


def generate(count: int, hw: int = 8, classes: int = 2, pattern: str = "blob-stripe",
             seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic single-channel images with balanced labels.

    ``blob-stripe``: class 0 a Gaussian blob, class 1 alternating row or column stripes.
    ``quadrant``: a blob whose quadrant (0..3) is the label.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")
    if pattern == "blob-stripe" and classes != 2:
        raise ValueError("blob-stripe has exactly 2 classes")
    if pattern == "quadrant" and not 2 <= classes <= 4:
        raise ValueError("quadrant supports 2 to 4 classes")
    if hw < 4:
        raise ValueError("image side must be at least 4")
    rng = np.random.default_rng(seed)
    x = np.empty((count, hw, hw, 1))
    y = np.arange(count) % classes
    y = y[rng.permutation(count)]
    for i in range(count):
        if pattern == "blob-stripe":
            img = _blob(rng, (hw, hw)) if y[i] == 0 else _stripe(rng, (hw, hw))
        else:
            q = int(y[i])
            half = hw / 2
            cy = rng.uniform(0.5, half - 0.5) + half * (q // 2)
            cx = rng.uniform(0.5, half - 0.5) + half * (q % 2)
            img = _blob(rng, (hw, hw), (cy, cx))
        img = img + 0.1 + 0.05 * rng.standard_normal((hw, hw))
        x[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    # round through float32 so written files reload bit-exactly
    return x.astype(np.float32).astype(np.float64), y.astype(np.int64)
