"""
SplitMix64 random streams.

Every random draw in the package (weight init, shuffling, phantom rendering,
augmentation) comes from an explicitly passed `Rng`. Output `i` of a stream is
a pure function of its state, so vectorized draws are bit-identical to drawing
one value at a time.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64, which is what SplitMix64 needs.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _key_to_u64(key: str | int) -> int:
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """A SplitMix64 stream. Identical seed gives an identical stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.state = self.seed

    def spawn(self, key: str | int) -> "Rng":
        """Derives an independent sub-stream named by `key` without advancing this one."""
        return Rng(_mix(self.seed ^ _key_to_u64(key)))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        states = np.uint64(self.state) + steps
        self.state = (self.state + n * GAMMA) & MASK64
        return _mix_array(states)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform floats in [low, high) with 53 random bits each."""
        n = 1 if size is None else int(np.prod(size))
        unit = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        values = low + (high - low) * unit
        if size is None:
            return float(values[0])
        return values.reshape(size)

    def normal(self, size=None, mean: float = 0.0, sigma: float = 1.0):
        """Gaussian draws by the Box-Muller transform."""
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:n]))
        values = mean + sigma * radius * np.cos(2.0 * np.pi * u[n:])
        if size is None:
            return float(values[0])
        return values.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        values = np.floor(self.uniform(size if size is not None else 1) * (high - low)).astype(np.int64) + low
        if size is None:
            return int(values[0])
        return values

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def bernoulli(self, p: float = 0.5) -> bool:
        return self.uniform() < p
