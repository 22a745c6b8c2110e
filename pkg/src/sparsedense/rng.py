"""Deterministic counter-based pseudo-random generation.

Everything stochastic in this package (synthetic data, weight noise,
batch shuffling, caption sampling) draws from a 64-bit splitmix stream:
the state advances by a fixed odd constant and each output is an
avalanche hash of the new state.  The algorithm is small enough to
restate exactly, so any reimplementation that reproduces the three
mixing steps reproduces every byte this package generates.

    state  <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z      <- state
    z      <- ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z      <- ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output <- z XOR (z >> 31)

Derived quantities:
  * uniform doubles take the top 53 bits: ``(u64 >> 11) * 2**-53``;
  * normals come from the Box-Muller transform on one uniform pair,
    with the second value of the pair cached and returned next;
  * bounded integers use modulo reduction (the bias is below 2**-32
    for every range used here);
  * shuffles are Fisher-Yates driven by bounded integers.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 2.0 ** -53


def mix64(x: int) -> int:
    """Avalanche a 64-bit value (the splitmix finalizer)."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *labels: int) -> int:
    """Fold integer labels into a seed, yielding an independent substream.

    Used to give each (seed, epoch) or (seed, purpose) combination its
    own deterministic stream without correlated prefixes.
    """
    out = mix64(seed & MASK64)
    for label in labels:
        out = mix64(out ^ ((label * GOLDEN) & MASK64))
    return out


class SplitMix64:
    """Stateful splitmix64 stream."""

    def __init__(self, seed: int):
        self._state = seed & MASK64
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN) & MASK64
        return mix64(self._state)

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def normal(self) -> float:
        """Standard normal via Box-Muller; pairs are consumed in order."""
        if self._spare_normal is not None:
            value = self._spare_normal
            self._spare_normal = None
            return value
        # u1 in (0, 1] so the log is finite.
        u1 = ((self.next_u64() >> 11) + 1) * _INV_2_53
        u2 = (self.next_u64() >> 11) * _INV_2_53
        radius = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = radius * math.sin(_TWO_PI * u2)
        return radius * math.cos(_TWO_PI * u2)

    def below(self, bound: int) -> int:
        """Integer in [0, bound) by modulo reduction."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def normals(self, count: int) -> list[float]:
        return [self.normal() for _ in range(count)]
