"""Portable, seedable pseudo-random number generation.

Everything that must be reproducible bit-for-bit across platforms (mask
tiles, weight initialization, synthetic scenes, data ordering) draws from
the SplitMix64 generator defined here instead of relying on numpy's
generator streams, whose distribution algorithms are allowed to change
between releases.

SplitMix64 (Steele, Lea, Flood 2014): a 64-bit counter-based generator.
Each output mixes `seed + k * golden_gamma` through a fixed 64-bit
finalizer, so a block of n draws can be produced either sequentially or
vectorized with identical results. Uniform doubles take the top 53 bits
and are exact IEEE-754 values on every platform. Normals use Box-Muller
on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_U53 = 1.0 / (1 << 53)


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def _mix_vec(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, matching _mix exactly
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Sequential SplitMix64 stream with vectorized bulk draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def _next_block(self, n: int) -> np.ndarray:
        ks = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        block = _mix_vec(np.uint64(self._state) + ks)
        self._state = (self._state + n * _GAMMA) & _MASK64
        return block

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 bits of resolution."""
        return (self.next_u64() >> 11) * _U53

    def uniforms(self, n: int) -> np.ndarray:
        return ((self._next_block(n) >> np.uint64(11)) * _U53).astype(np.float64)

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs.

        u1 is reflected to (0, 1] so log never sees zero.
        """
        u = self.uniforms(2 * n)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, bias-free."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = (_MASK64 + 1) - (_MASK64 + 1) % n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, *tags: int) -> int:
    """Derive an independent child seed from a root seed and integer tags.

    Mixing is injective enough for the handful of streams we need
    (mask, init, scenes, epoch order) and is stable across platforms.
    """
    z = seed & _MASK64
    for t in tags:
        z = _mix(((z ^ (t & _MASK64)) + _GAMMA) & _MASK64)
    return z
