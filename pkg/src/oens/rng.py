"""Seeded pseudo-random streams.

All randomness in the package (parameter init, batch shuffling, data
synthesis) comes from xoshiro256** generators.  xoshiro256** is a 64-bit
linear shift-register generator (Blackman & Vigna, 2018) with 256 bits of
state; we seed it through SplitMix64 as its authors recommend.

Streams are *named*: ``stream(seed, "init", 3)`` and ``stream(seed, "shuffle")``
are statistically unrelated, so adding draws for one purpose never shifts the
numbers seen by another.  The generator is written in pure Python so results
do not depend on the numpy version installed.
"""
from __future__ import annotations

import math
import zlib

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def stream_key(seed: int, *path: str | int) -> int:
    """Fold a seed and a purpose path into one 64-bit key."""
    h = seed & MASK64
    for part in path:
        if isinstance(part, str):
            code = zlib.crc32(part.encode("utf-8")) | (1 << 40)
        else:
            code = int(part) & MASK64
        _, h = _splitmix64(h ^ code)
        _, h = _splitmix64(h)
    return h


class Xoshiro256:
    """xoshiro256** generator.

    >>> g = Xoshiro256(0)
    >>> g.next_u64() == Xoshiro256(0).next_u64()
    True
    """

    __slots__ = ("_s", "_spare")

    def __init__(self, key: int):
        x = key & MASK64
        state = []
        for _ in range(4):
            x, z = _splitmix64(x)
            state.append(z)
        if not any(state):  # all-zero state is a fixed point
            state[0] = 1
        self._s = state
        self._spare = None

    @classmethod
    def from_state(cls, state: list[int]) -> "Xoshiro256":
        g = cls.__new__(cls)
        g._s = [x & MASK64 for x in state]
        g._spare = None
        return g

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        """Standard normal via the Marsaglia polar method."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        while True:
            u = 2.0 * self.random() - 1.0
            v = 2.0 * self.random() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                break
        f = math.sqrt(-2.0 * math.log(s) / s)
        self._spare = v * f
        return u * f

    def uniform_array(self, shape, low: float, high: float) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.uniform(low, high) for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.normal() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)

    def categorical(self, cumulative: list[float]) -> int:
        u = self.random()
        for i, c in enumerate(cumulative):
            if u < c:
                return i
        return len(cumulative) - 1


def stream(seed: int, *path: str | int) -> Xoshiro256:
    """Independent generator for ``path`` under ``seed``."""
    return Xoshiro256(stream_key(seed, *path))
