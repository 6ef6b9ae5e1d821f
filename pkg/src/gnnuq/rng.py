"""splitmix64 streams.

Every random decision in the package (splits, genomes, weight init, batch
order, dropout masks) is drawn from splitmix64 so that runs are
bit-reproducible from a single integer seed.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, giving an independent child stream."""
    s = seed & MASK64
    for k in keys:
        s = mix64((s ^ mix64((k + 1) * GAMMA)) + GAMMA)
    return s


class SplitMix64:
    """Sequential splitmix64 generator.

    The k-th output (k >= 1) equals ``mix64(seed + k * GAMMA)``, which lets
    :meth:`uniform_array` produce long runs without a Python loop.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def below(self, n: int) -> int:
        """Integer in ``[0, n)``; modulo reduction (bias < n / 2**64)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def u64_array(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + k * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates shuffle, returned for convenience."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(n)`` via a partial Fisher-Yates."""
        if k > n:
            raise ValueError("cannot sample more items than available")
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
