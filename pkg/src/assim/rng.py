"""Deterministic, splittable random streams.

Every stochastic routine in the package draws from a ``SeededRng``: a numpy
``Generator`` over the Philox counter-based bit generator keyed by
``(seed, stream)``. Identical keys reproduce identical draw sequences, and
substreams are derived by mixing integers into the stream id, so per-step and
per-worker randomness is independent of thread scheduling and replayable from
the key alone (no generator state needs to be serialized for resume).
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF


def _mix64(a: int, b: int) -> int:
    # splitmix64-style finalizer; decorrelates derived stream ids
    x = (a ^ ((b + 0x9E3779B97F4A7C15) * 0xBF58476D1CE4E5B9)) & _MASK
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class SeededRng:
    """Counter-based random stream keyed by (seed, stream)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK
        self.stream = int(stream) & _MASK
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"

    def substream(self, tag: int) -> "SeededRng":
        """Fresh stream derived from this one; stable under draw order."""
        return SeededRng(self.seed, _mix64(self.stream, int(tag)))

    def split(self, n: int) -> list["SeededRng"]:
        """n independent substreams (tags 0..n-1)."""
        return [self.substream(i) for i in range(n)]

    # Thin passthroughs so call sites read like numpy.
    def standard_normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)
