"""Counter-based pseudo-random generator with splittable streams.

Algorithm identity: "splitmix64-v1". Every draw is a pure function of
(key, counter), where the key is derived from a user seed and a chain of
split indices via the splitmix64 finalizer. Streams never share state, so
samples can be generated in any order (or in parallel) and still be
bitwise reproducible.
"""
from __future__ import annotations

import math

import numpy as np

ALGORITHM = "splitmix64-v1"

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN_INT = 0x9E3779B97F4A7C15
_GOLDEN = np.uint64(_GOLDEN_INT)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0 ** -53)


def _mix(z: np.ndarray):
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    """splitmix64 finalizer on plain ints (explicit 64-bit wraparound)."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_key(seed: int, *path: int) -> int:
    """Derive a stream key from a seed and a chain of split indices."""
    key = _mix_int(((seed & _MASK) * _GOLDEN_INT + _GOLDEN_INT) & _MASK)
    for index in path:
        key = _mix_int(key ^ _mix_int(((index + 1) & _MASK) * _GOLDEN_INT & _MASK))
    return key


class Stream:
    """One random stream: a fixed key plus a monotone draw counter."""

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = key & 0xFFFFFFFFFFFFFFFF
        self.counter = counter

    @classmethod
    def from_seed(cls, seed: int, *path: int) -> "Stream":
        return cls(derive_key(seed, *path))

    def split(self, index: int) -> "Stream":
        """Child stream independent of this one and of other split indices."""
        return Stream(_mix_int(self.key ^ _mix_int(((index + 1) & _MASK) * _GOLDEN_INT & _MASK)))

    def _raw(self, n: int) -> np.ndarray:
        start = self.counter + 1
        self.counter += n
        ctr = np.arange(start, start + n, dtype=np.uint64)
        return _mix(np.uint64(self.key) + ctr * _GOLDEN)

    def integers(self, low: int, high: int, size: int | None = None):
        """Uniform integers in [low, high); modulo bias is negligible at 64 bits."""
        n = 1 if size is None else int(size)
        span = np.uint64(high - low)
        vals = (self._raw(n) % span).astype(np.int64) + low
        return int(vals[0]) if size is None else vals

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform floats in [low, high), double precision."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = low + (high - low) * u
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller on paired uniform draws."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53  # (0, 1]
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out.reshape(shape) if shape else float(out[0])

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle, returning a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, items):
        return items[self.integers(0, len(items))]
