"""Portable pseudo-random streams.

xoshiro256** seeded through SplitMix64, with fixed conversions to floats,
normals and bounded integers, so that datasets and initial weights are
reproducible byte-for-byte from a 64-bit seed in any language.

Conversions:

* uniform double: ``(next_u64() >> 11) * 2**-53`` in ``[0, 1)``
* normal: Box-Muller on ``u1 = 1 - uniform()``, ``u2 = uniform()``; the cosine
  branch is returned first and the sine branch is cached for the next call
* bounded integer: ``next_u64() % n``
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** generator."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self.s = [sm.next_u64() for _ in range(4)]
        self._spare = None

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def below(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"bound must be positive, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates shuffle (walks from the last index down)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def uniform_array(self, shape, low: float, high: float) -> np.ndarray:
        n = int(np.prod(shape))
        vals = [low + (high - low) * self.uniform() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape)

    def normal_array(self, shape, sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        return (sigma * np.array([self.normal() for _ in range(n)], dtype=np.float64)).reshape(shape)


def derive_seed(seed: int, stream: int) -> int:
    """Independent child seed for a numbered sub-stream."""
    return SplitMix64((seed ^ (stream * 0xD1B54A32D192ED03)) & MASK64).next_u64()
