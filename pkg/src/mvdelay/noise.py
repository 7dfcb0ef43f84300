"""Counter-style Gaussian noise streams.

Every increment is a pure function of ``(seed, tag, channel, step, stream id)``.
For each ``(channel, step)`` a Philox generator is keyed from the seed
sequence and rows are drawn in stream-id order, so row ``i`` never depends
on how many rows are requested.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["NoiseStream", "CHANNELS"]

# "aux" feeds the acceptance draws of the maximal reflection step
CHANNELS = {"W1": 1, "W2": 2, "W1_tilde": 3, "aux": 4}


class NoiseStream:
    """Brownian increments ``sqrt(h) * N(0, I)`` per particle and channel.

    ``tag`` separates independent families drawn from one master seed (for
    example the reference flow of a Picard solve and the particles it drives).
    """

    def __init__(self, seed: int, h: float, tag: int = 0, cache: bool = False):
        self.seed = int(seed)
        self.h = float(h)
        self.tag = int(tag)
        self._sqrt_h = math.sqrt(self.h)
        self._cache = {} if cache else None

    def _block(self, channel: str, step: int, rows: int, dim: int) -> np.ndarray:
        code = CHANNELS[channel]
        key = (code, step, dim)
        if self._cache is not None:
            hit = self._cache.get(key)
            if hit is not None and hit.shape[0] >= rows:
                return hit
        ss = np.random.SeedSequence([self.seed, self.tag, code, int(step)])
        block = np.random.Generator(np.random.Philox(ss)).standard_normal((rows, dim))
        if self._cache is not None:
            self._cache[key] = block
        return block

    def increments(self, channel: str, step: int, ids, dim: int) -> np.ndarray:
        """Increments for the given stream ids at one step, shape ``(len(ids), dim)``."""
        if channel not in CHANNELS:
            raise KeyError(f"unknown noise channel {channel!r}")
        ids = np.asarray(ids, dtype=np.int64)
        rows = int(ids.max()) + 1 if ids.size else 0
        block = self._block(channel, step, rows, dim)
        return self._sqrt_h * block[ids]

    def clear(self):
        if self._cache is not None:
            self._cache.clear()
