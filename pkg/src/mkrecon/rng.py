"""Deterministic 64-bit random generator (splitmix64).

All randomness in the package flows through this generator so that phantom
volumes, parameter initialisation and batch shuffling are reproducible
bit-for-bit across runs and across implementations.  The algorithm: the state
advances by a fixed odd constant and each output is a finalising mix of the
new state, so the k-th draw depends only on (seed, k).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a string; used for stable id-based splits."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """Child seed for an independent named stream."""
    return _mix((seed & _MASK64) ^ fnv1a64(tag))


class SplitMix64:
    """Splitmix64 stream.  Scalar and vectorised draws share one stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix(self._state)

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange needs n > 0")
        return self.next_u64() % n

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53  # 53-bit mantissa in [0, 1)
        return lo + u * (hi - lo)

    def fill_uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """n uniform draws as float64, identical to n scalar uniform() calls."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = (np.uint64(self._state) + idx * np.uint64(_GOLDEN))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN) & _MASK64
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + u * (hi - lo)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def unit_cos_sin(self) -> tuple[float, float]:
        """Random (cos, sin) pair on the unit circle without transcendentals.

        Rejection-samples a point in the unit disk and maps it through the
        half-angle identities, so only +,*,/ touch the stream values.
        """
        while True:
            u = self.uniform(-1.0, 1.0)
            v = self.uniform(-1.0, 1.0)
            r2 = u * u + v * v
            if 1e-4 < r2 <= 1.0:
                return (u * u - v * v) / r2, 2.0 * u * v / r2
