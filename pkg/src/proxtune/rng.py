"""Portable counter-based random streams.

Every draw is ``splitmix64(key + counter * 0x9E3779B97F4A7C15)``, so a stream is
fully determined by its 64-bit key and position. Keys are derived from an
integer seed and a text label with FNV-1a, which keeps unrelated consumers
(initialization, inputs, noise, batching) on independent streams.

The constants are the published SplitMix64 and FNV-1a 64-bit ones, so the
integer outputs can be reproduced in any language.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def derive_key(seed: int, label: str) -> int:
    """64-bit stream key for ``(seed, label)``."""
    base = np.array([(seed & _MASK64) ^ fnv1a64(label.encode("utf-8"))], dtype=np.uint64)
    with np.errstate(over="ignore"):
        return int(_mix(base + _GOLDEN)[0])


class Stream:
    """Sequential view over one counter-based stream.

    >>> s = Stream(0, "demo")
    >>> s.uniform(3).shape
    (3,)
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = label
        self.key = np.uint64(derive_key(self.seed, label))
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self.key + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits."""
        return (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller (cosine branch only)."""
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high) by scaling uniforms; bias is < 2**-40 for desk-scale ``high``."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)
