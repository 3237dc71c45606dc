"""Counter-based random streams.

Every random number used by the package is addressed by
``(seed, purpose, stream, step)``.  The Philox key encodes the first three,
the counter encodes the block of steps, so any increment can be regenerated
without replaying its predecessors and ensembles can be split across workers
without changing results.
"""

from __future__ import annotations

import numpy as np

BLOCK = 256

PURPOSES = {
    "path": 0,
    "picard": 1,
    "propagate": 2,
    "reservoir": 3,
    "permutation": 4,
    "bootstrap": 5,
    "sample": 6,
    "validate": 7,
}

_MASK64 = (1 << 64) - 1


def philox(seed: int, purpose: str = "path", stream: int = 0, block: int = 0) -> np.random.Generator:
    """Generator for one ``(seed, purpose, stream)`` key at counter ``block``."""
    if not 0 <= stream < (1 << 40):
        raise ValueError(f"stream id {stream} out of range")
    key = np.array([int(seed) & _MASK64, (PURPOSES[purpose] << 40) | stream], dtype=np.uint64)
    counter = np.array([0, 0, 0, block], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class NormalStream:
    """Standard normal rows, one row of width ``width`` per step."""

    def __init__(self, seed: int, stream: int, width: int, purpose: str = "path"):
        self.seed = seed
        self.stream = stream
        self.width = width
        self.purpose = purpose
        self._cached = None

    def _block(self, b: int) -> np.ndarray:
        if self._cached is None or self._cached[0] != b:
            g = philox(self.seed, self.purpose, self.stream, b)
            self._cached = (b, g.standard_normal((BLOCK, self.width)))
        return self._cached[1]

    def rows(self, start: int, count: int) -> np.ndarray:
        """Rows for steps ``start .. start + count - 1``."""
        out = np.empty((count, self.width))
        pos = 0
        while pos < count:
            step = start + pos
            b, off = divmod(step, BLOCK)
            take = min(BLOCK - off, count - pos)
            out[pos:pos + take] = self._block(b)[off:off + take]
            pos += take
        return out


def stream_rows(seed: int, streams, width: int, start: int, count: int,
                purpose: str = "path") -> np.ndarray:
    """Stack rows of several streams into shape ``(count, len(streams), width)``."""
    streams = list(streams)
    out = np.empty((count, len(streams), width))
    for i, s in enumerate(streams):
        out[:, i, :] = NormalStream(seed, s, width, purpose).rows(start, count)
    return out
