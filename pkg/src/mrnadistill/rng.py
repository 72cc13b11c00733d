"""Deterministic counter-based random number generation.

All stochastic behaviour in the toolkit (parameter init, dropout masks,
data shuffling, subsampling, synthetic data) flows through `SeededRng`,
a splitmix64 generator run in counter mode: draw i of a stream is a pure
integer function of (seed, i), so streams are reproducible across runs
and independent of numpy version.  Bulk draws vectorize over uint64
arrays.  Uniform doubles use the top 53 output bits and are bit-exact
everywhere; normals go through Box-Muller and inherit the platform's
libm rounding in the last ulp.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer (Vigna); z is a uint64 array, ops wrap mod 2^64
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _hash_label(label: str) -> int:
    # FNV-1a over the UTF-8 bytes, folded into 64 bits
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _U64_MASK
    return h


class SeededRng:
    """Deterministic stream of draws from a 64-bit seed.

    Two instances constructed with the same seed produce identical draw
    sequences.  `derive(label)` yields an independent child stream so
    e.g. dropout and data shuffling never share counters.
    """

    def __init__(self, seed: int):
        self._key = np.uint64(seed & _U64_MASK)
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix(self._key + idx * _GOLDEN)

    def uniform(self, shape=()) -> np.ndarray | float:
        """Uniform float64 draws in [0, 1)."""
        n = int(np.prod(shape)) if shape != () else 1
        out = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return float(out[0]) if shape == () else out.reshape(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray | float:
        """N(0, std^2) draws via Box-Muller."""
        n = int(np.prod(shape)) if shape != () else 1
        m = (n + 1) // 2
        u1 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # log1p(-u) keeps u=0 finite
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n] * std
        return float(out[0]) if shape == () else out.reshape(shape)

    def keep_mask(self, shape, drop_p: float) -> np.ndarray:
        """Boolean keep mask with P(keep) = 1 - drop_p, compared in the
        raw integer domain (no float conversion on the hot path)."""
        n = int(np.prod(shape))
        threshold = np.uint64(min(int(drop_p * 2.0**64), (1 << 64) - 1))
        return (self._raw(n) >= threshold).reshape(shape)

    def integers(self, upper: int, shape=()) -> np.ndarray | int:
        """Integer draws in [0, upper) by scaling 53-bit uniforms."""
        u = self.uniform(shape if shape != () else (1,))
        out = np.minimum((u * upper).astype(np.int64), upper - 1)
        return int(out[0]) if shape == () else out

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of uniform keys)."""
        keys = self.uniform((n,))
        return np.argsort(keys, kind="stable")

    def shuffled(self, items):
        """Return a list with items in a seeded random order."""
        items = list(items)
        return [items[i] for i in self.permutation(len(items))]

    def derive(self, label: str) -> "SeededRng":
        """Independent child stream identified by a string label."""
        mixed = _mix(np.uint64([(int(self._key) ^ _hash_label(label)) & _U64_MASK]))
        return SeededRng(int(mixed[0]))


def hash_to_unit(text: str, seed: int) -> float:
    """Deterministic map of a string to [0, 1); used for held-out splits."""
    h = _hash_label(text) ^ (seed & _U64_MASK)
    v = _mix(np.uint64([h]))[0]
    return float(int(v) >> 11) * (2.0**-53)
