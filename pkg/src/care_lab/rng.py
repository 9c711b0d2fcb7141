"""Portable seeded PRNG: splitmix64 state advance, Box-Muller normals.

Every random draw in the package (initialization, exploration, replay
sampling, policy noise, environment resets) goes through this stream, so a
seed pins a run on any platform.
"""
from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Deterministic child seed for an independent stream (e.g. evaluation)."""
    z = np.array([seed & _MASK], dtype=np.uint64)
    for key in keys:
        if isinstance(key, str):
            key = fnv1a64(key)
        z = _mix(z ^ np.uint64(key & _MASK)) + _GAMMA
    return int(z[0])


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


class SeededPrng:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * _GAMMA
            out = _mix(states)
        self.state = (self.state + n * int(_GAMMA)) & _MASK
        return out

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(size)) if size is not None else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if size is None else u.reshape(size)

    def uniform_range(self, low: float, high: float, size=None):
        return low + (high - low) * self.uniform(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normals; each consumes two successive uniforms (cosine branch)."""
        n = int(np.prod(size)) if size is not None else 1
        u = self.uniform((n, 2))
        z = np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(_TWO_PI * u[:, 1])
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size: int) -> np.ndarray:
        """Uniform integers in [0, high)."""
        idx = np.floor(self.uniform(size) * high).astype(np.int64)
        return np.minimum(idx, high - 1)

    def spawn(self, *keys: int | str) -> "SeededPrng":
        return SeededPrng(derive_seed(self.state, *keys))
