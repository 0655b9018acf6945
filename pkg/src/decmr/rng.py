"""Deterministic random streams.

Every random decision in the pipeline (weight init, dropout, augmentation,
splits, phantom synthesis) draws from an Rng so that a (seed, stream) pair
fully determines the sequence on any platform.  Streams are backed by the
counter-based Philox bit generator, keyed by the 128-bit pair
(seed, stream id); child streams mix a new id into the key without
consuming any state from the parent.
"""

from __future__ import annotations

import numpy as np

_MIX = 0x9E3779B97F4A7C15  # splitmix64 increment


def _mix64(value: int) -> int:
    """splitmix64 finalizer; spreads small stream ids over 64 bits."""
    value = (value + _MIX) & 0xFFFFFFFFFFFFFFFF
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return value ^ (value >> 31)


class Rng:
    """Seeded random stream with cheap, collision-resistant child streams."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        )

    def child(self, stream_id: int) -> "Rng":
        """Independent stream derived from (seed, stream, stream_id)."""
        return Rng(self.seed, _mix64(self.stream ^ _mix64(stream_id)))

    def uniform(self, lo: float, hi: float, size=None) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(mean, std, size=size)

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers in [lo, hi] inclusive."""
        return self._gen.integers(lo, hi, size=size, endpoint=True)

    def random(self, size=None):
        return self._gen.random(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, items, p=None):
        idx = self._gen.choice(len(items), p=p)
        return items[int(idx)]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
