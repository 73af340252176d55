"""Counter-based pseudo-random generator (SplitMix64).

The whole package draws randomness through this generator so that every
artifact is a pure function of its seeds. The generator is counter-based:

    value(k) = mix64(seed + (k + 1) * 0x9E3779B97F4A7C15)   (mod 2^64)

where mix64 is the SplitMix64 finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Draw k is independent of any other draw, so whole blocks of values can be
produced vectorized, and the same (seed, counter) always yields the same
bits on every platform. Doubles come from the top 53 bits: u = (v >> 11) *
2^-53, uniform in [0, 1).

Substreams are derived by hashing a string tag into the seed
(seed' = mix64(seed ^ fnv1a64(tag))), which keeps independently seeded
components (data generation, parameter init, shuffling) decoupled.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> np.uint64:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = (h ^ np.uint64(byte)) * _FNV_PRIME
    return h


class SplitMix64:
    """Stateful view over the counter-based stream: draws advance a counter."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = np.uint64(counter)

    def derive(self, tag: str) -> "SplitMix64":
        """Independent substream keyed by a string tag; does not advance self."""
        with np.errstate(over="ignore"):
            return SplitMix64(int(_mix64(self.seed ^ _fnv1a64(tag))))

    def next_uint64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit values, vectorized."""
        with np.errstate(over="ignore"):
            ks = self.counter + np.uint64(1) + np.arange(n, dtype=np.uint64)
            out = _mix64(self.seed + ks * _GOLDEN)
            self.counter = self.counter + np.uint64(n)
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n doubles uniform in [low, high)."""
        u = (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return low + u * (high - low)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform-ish in [0, bound) via modulo (bias negligible at
        desk-scale bounds, and determinism is what matters here)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.next_uint64(n) % np.uint64(bound)).astype(np.int64)

    def shuffled(self, n: int) -> np.ndarray:
        """Deterministic Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            perm[i], perm[j] = perm[j], perm[i]
        return perm
