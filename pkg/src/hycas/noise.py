"""Per-forward randomness bundles and counter-based seed streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# draws are generated in fixed-size chunks keyed by (job_seed, phase, chunk);
# the chunk, not the worker, is the unit of reproducibility
CHUNK = 256

PHASE_PILOT = 0
PHASE_MAIN = 1
PHASE_EXPECTED = 2
PHASE_FROZEN = 3
PHASE_INFERENCE = 4
PHASE_TRAIN = 5
PHASE_ATTACK = 6
PHASE_AUDIT = 7


@dataclass(frozen=True)
class NoiseState:
    """Seeds for random-projection draws (psi) and RANI masks (omega), plus an optional input draw."""

    psi_seed: int
    omega_seed: int
    epsilon: np.ndarray | None = None

    def without_input_noise(self) -> "NoiseState":
        return NoiseState(self.psi_seed, self.omega_seed)


def noise_from_key(*key: int) -> NoiseState:
    """A NoiseState derived deterministically from an integer key tuple."""
    psi, omega = np.random.SeedSequence(list(key)).generate_state(2, dtype=np.uint32)
    return NoiseState(int(psi), int(omega))


def noise_stream(job_seed: int, phase: int, count: int, input_shape: tuple | None = None,
                 sigma: float = 0.0, start: int = 0) -> list[NoiseState]:
    """NoiseStates for draws ``start .. start+count`` of a job phase.

    Draw i always receives the same state regardless of how the range is split,
    so serial and parallel evaluation agree bit for bit.
    """
    out: list[NoiseState] = []
    i = start
    stop = start + count
    while i < stop:
        chunk, offset = divmod(i, CHUNK)
        rng = np.random.default_rng(np.random.SeedSequence([job_seed, phase, chunk]))
        seeds = rng.integers(0, 2**32, size=(CHUNK, 2), dtype=np.uint64)
        eps = None
        if input_shape is not None:
            eps = rng.standard_normal((CHUNK,) + tuple(input_shape)) * sigma
        take = min(CHUNK - offset, stop - i)
        for j in range(offset, offset + take):
            e = None if eps is None else eps[j]
            out.append(NoiseState(int(seeds[j, 0]), int(seeds[j, 1]), e))
        i += take
    return out


def stack_epsilon(states: list[NoiseState], input_shape: tuple) -> np.ndarray:
    return np.stack([s.epsilon if s.epsilon is not None else np.zeros(input_shape) for s in states])
