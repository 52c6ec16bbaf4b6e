"""HYC1 checkpoint files: named float64 tensors with a trailing CRC32."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .network import HycasNetwork, build_network

MAGIC = b"HYC1"
VERSION = 1
_U32 = struct.Struct("<I")

# architecture fields stored as config/<name> tensors, with their decoders
_ARCH = {
    "input_shape": lambda a: tuple(int(v) for v in a),
    "num_classes": lambda a: int(a[0]),
    "channels": lambda a: tuple(int(v) for v in a),
    "kernel_size": lambda a: int(a[0]),
    "cutoff_rho": lambda a: float(a[0]),
    "skip_beta": lambda a: float(a[0]),
    "fusion_rani": lambda a: bool(a[0]),
    "stages": lambda a: int(a[0]),
    "pi_batch": lambda a: int(a[0]),
    "fourier_guard": lambda a: bool(a[0]),
    "seed": lambda a: int(a[0]),
}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(a.ndim))
        parts.extend(_U32.pack(d) for d in a.shape)
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def decode(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError("not a HYC1 checkpoint")
    body, (crc,) = raw[:-4], _U32.unpack(raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch; file is corrupt")
    (version,) = _U32.unpack_from(body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = _U32.unpack_from(body, 8)
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = _U32.unpack_from(body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = _U32.unpack_from(body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def network_tensors(net: HycasNetwork) -> dict[str, np.ndarray]:
    tensors = {}
    for key in _ARCH:
        v = net.arch[key]
        tensors[f"config/{key}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    tensors["meta/calibrator_gamma"] = np.array([net.calibrator_gamma])
    tensors["meta/lip_bound"] = np.array([np.nan if net.lip_bound is None else net.lip_bound])
    for name, p in net.named_parameters().items():
        tensors[name] = p.data
    for name, b in net.buffers().items():
        tensors[name] = b
    return tensors


def save_network(net: HycasNetwork, path) -> bytes:
    raw = encode(network_tensors(net))
    Path(path).write_bytes(raw)
    return raw


def load_network(path) -> HycasNetwork:
    """Rebuild a network from its stored architecture, then overwrite every tensor verbatim."""
    tensors = decode(Path(path).read_bytes())
    try:
        arch = {k: dec(tensors[f"config/{k}"]) for k, dec in _ARCH.items()}
    except KeyError as exc:
        raise CheckpointError(f"missing architecture field {exc}") from None
    net = build_network(**arch)
    params = net.named_parameters()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"tensor {name}: shape {tensors[name].shape} vs {p.data.shape}")
        p.data = tensors[name].copy()
    for i, block in enumerate(net.blocks):
        for v in ("FDPAN", "RPFAN"):
            block.streams[v].mixer.U = tensors[f"blocks.{i}.{v}.mixer"].copy()
    net.calibrator_gamma = float(tensors["meta/calibrator_gamma"][0])
    lb = float(tensors["meta/lip_bound"][0])
    net.lip_bound = None if np.isnan(lb) else lb
    return net
