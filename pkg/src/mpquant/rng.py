"""Deterministic random number generation.

Every stochastic step in the toolkit (weight init, data generation, k-means
seeding, weight perturbation) must replay identically across platforms and
numpy versions, so this module carries its own generator instead of
delegating to ``numpy.random``:

* stream: xoshiro256** with its four state words expanded from the 64-bit
  seed by splitmix64,
* uniforms: top 53 bits of each output, mapped to [0, 1),
* normals: Box-Muller on consecutive uniforms, second value of each pair
  cached,
* child streams: ``spawn(i)`` reseeds with ``seed XOR mix64((i + 1) * GOLDEN)``
  so per-layer workers never share a stream.

All of the above is part of the reproducibility contract; changing any of it
invalidates committed golden values.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """splitmix64 finalizer; the hash used for child-seed derivation."""
    z = x & _MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def _splitmix_next(state: int) -> tuple[int, int]:
    state = (state + _GOLDEN) & _MASK64
    return state, mix64(state)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """Seeded xoshiro256** stream with uniform/normal/integer helpers."""

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        s = self._seed
        words = []
        for _ in range(4):
            s, w = _splitmix_next(s)
            words.append(w)
        if not any(words):  # all-zero state would lock the generator
            words[0] = _GOLDEN
        self._s = words
        self._cached_normal: float | None = None

    @property
    def seed(self) -> int:
        return self._seed

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        """Standard normal via Box-Muller; pair partner is cached."""
        if self._cached_normal is not None:
            z = self._cached_normal
            self._cached_normal = None
            return z
        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))  # 1 - u1 in (0, 1]
        theta = 2.0 * math.pi * u2
        self._cached_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape, sigma: float = 1.0) -> np.ndarray:
        """float64 array of N(0, sigma^2) draws; sigma == 0 gives exact zeros."""
        n = int(np.prod(shape))
        if sigma == 0.0:
            return np.zeros(shape, dtype=np.float64)
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal() * sigma
        return out.reshape(shape)

    def uniforms(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.uniform()
        return out.reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def gamma(self, alpha: float) -> float:
        """Gamma(alpha, 1) via Marsaglia-Tsang; alpha < 1 uses the boost step."""
        if alpha <= 0.0:
            raise ValueError("gamma shape must be positive")
        if alpha < 1.0:
            u = 1.0 - self.uniform()  # in (0, 1]
            return self.gamma(alpha + 1.0) * u ** (1.0 / alpha)
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = self.uniform()
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v
            if u == 0.0:
                return d * v

    def dirichlet(self, alpha: float, k: int) -> np.ndarray:
        """Symmetric Dirichlet(alpha) row of length k, float64."""
        draws = np.array([self.gamma(alpha) for _ in range(k)], dtype=np.float64)
        total = draws.sum()
        if total <= 0.0:
            return np.full(k, 1.0 / k)
        return draws / total

    def spawn(self, index: int) -> "Rng":
        """Independent child stream for worker `index` (documented derivation)."""
        return Rng(self._seed ^ mix64(((index + 1) * _GOLDEN) & _MASK64))
