"""Seeded random streams.

Uniform draws come from numpy's PCG64 bit generator seeded through a
``SeedSequence``; Gaussian draws use the Box-Muller transform on those
uniforms so the normal stream is fully determined by the uniform stream.
Independent sub-streams are derived with ``split(stream_id)``, which sets the
SeedSequence spawn key to ``(stream_id,)``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# named sub-streams used across the package
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_BATCH = 3
STREAM_TRAIN = 4
STREAM_HELDOUT = 5
STREAM_EVAL = 6


class Rng:
    def __init__(self, seed: int, stream_id: int | None = None):
        self.seed = int(seed) & MASK64
        self.stream_id = stream_id
        key = () if stream_id is None else (int(stream_id),)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, stream_id: int) -> "Rng":
        return Rng(self.seed, stream_id if self.stream_id is None else self.stream_id * 1_000_003 + stream_id)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1], keeps log finite
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(shape)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def raw(self, size: int) -> np.ndarray:
        """Raw 64-bit words from the underlying generator."""
        return self._gen.bit_generator.random_raw(size)
