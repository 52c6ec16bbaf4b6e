"""Flat ``key = value`` configuration files for the train command."""

from __future__ import annotations

from pathlib import Path

from .attacks import AttackConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(",", " ").split())


TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "optimizer": str,
    "sigma": float, "loss_weights": _floats, "learnable_weights": _bool, "seed": int,
    "weight_decay": float, "momentum": float, "pi_steps": int, "lr_decay": float,
    "lr_decay_every": int,
}
ATTACK_KEYS = {
    "attack_epsilon": float, "attack_step": float, "attack_iters": int,
    "attack_restarts": int, "attack_seed": int,
}
ARCH_KEYS = {
    "channels": _ints, "kernel_size": int, "cutoff_rho": float, "skip_beta": float,
    "fusion_rani": _bool, "stages": int, "pi_batch": int, "fourier_guard": _bool,
    "arch_seed": int,
}
KNOWN = {**TRAIN_KEYS, **ATTACK_KEYS, **ARCH_KEYS}


def parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in KNOWN:
            raise ConfigError(f"unknown config key '{key}' (line {lineno})")
        try:
            values[key] = KNOWN[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}' (line {lineno}): {exc}") from None
    return values


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(p.read_text())


def build_configs(values: dict, adversarial: bool) -> tuple[TrainConfig, dict]:
    """TrainConfig plus keyword arguments for build_network."""
    train = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    if adversarial:
        a = {k[len("attack_"):]: v for k, v in values.items() if k in ATTACK_KEYS}
        eps = a.pop("epsilon", 0.05)
        train["attack"] = AttackConfig(epsilon=eps, step=a.pop("step", eps / 2.5),
                                       iters=a.pop("iters", 3), restarts=a.pop("restarts", 1),
                                       seed=a.pop("seed", values.get("seed", 0)))
        train.setdefault("sigma", 0.0)
    arch = {k: v for k, v in values.items() if k in ARCH_KEYS}
    if "arch_seed" in arch:
        arch["seed"] = arch.pop("arch_seed")
    else:
        arch["seed"] = values.get("seed", 0)
    try:
        return TrainConfig(**train), arch
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
