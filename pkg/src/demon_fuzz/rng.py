"""Seeded random source for the fuzz loop.

Backed by :class:`random.Random` (Mersenne Twister), whose integer-seeded
stream is stable across CPython versions and platforms.
"""

from __future__ import annotations

import random
from typing import Sequence, TypeVar

T = TypeVar("T")

SEED_MASK = (1 << 64) - 1


class RngState:
    __slots__ = ("seed", "counter", "_rand")

    def __init__(self, seed: int):
        self.seed = seed & SEED_MASK
        self.counter = 0
        self._rand = random.Random(self.seed)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("n must be positive")
        self.counter += 1
        return self._rand.randrange(n)

    def between(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]``."""
        self.counter += 1
        return self._rand.randint(lo, hi)

    def choice(self, seq: Sequence[T]) -> T:
        return seq[self.below(len(seq))]

    def coin(self, p: float = 0.5) -> bool:
        self.counter += 1
        return self._rand.random() < p

    def randbytes(self, n: int) -> bytes:
        self.counter += 1
        return bytes(self._rand.getrandbits(8) for _ in range(n))

    def fork(self, index: int) -> "RngState":
        """Independent stream for worker ``index`` (seed + index)."""
        return RngState(self.seed + index)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, counter={self.counter})"
