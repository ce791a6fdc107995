"""Portable integer-state random streams.

The generator is xorshift64* (Vigna 2016): state ``s`` is advanced by
``s ^= s >> 12; s ^= s << 25; s ^= s >> 27`` and the output is
``s * 0x2545F4914F6CDD1D mod 2**64``. Per-sample streams are split off a base
seed with one round of splitmix64 applied to ``seed ^ (index * golden)``, so
sample ``i`` never depends on samples ``< i``. Doubles take the top 53 output
bits. Everything is plain integer arithmetic and reproducible in any language.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        s = splitmix64(seed & MASK64)
        self.state = s or GOLDEN

    @classmethod
    def stream(cls, seed: int, index: int) -> "XorShift64Star":
        return cls((seed ^ ((index + 1) * GOLDEN)) & MASK64)

    def next_u64(self) -> int:
        s = self.state
        s ^= s >> 12
        s ^= (s << 25) & MASK64
        s ^= s >> 27
        self.state = s
        return (s * 0x2545F4914F6CDD1D) & MASK64

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ValueError("empty range")
        return lo + int(self.random() * (hi - lo + 1))

    def normal(self) -> float:
        # Box-Muller; consumes two draws
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
