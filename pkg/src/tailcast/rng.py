"""Reproducible random-number streams.

Every stochastic routine in this package takes an explicit numpy
``Generator``. Streams are derived from a ``(seed, stream_id)`` pair via
the counter-based Philox bit generator, so distinct stream ids give
statistically independent streams and parallel workers can be assigned
streams deterministically: worker ``i`` of a run seeded with ``s`` uses
``stream(s, i)`` and the result never depends on how work is scheduled.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream", "spawn"]


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Return the Philox generator identified by ``(seed, stream_id)``.

    The pair is folded into the 128-bit Philox key, so any two distinct
    pairs yield independent counter-based streams.
    """
    if seed < 0 or stream_id < 0:
        raise ValueError("seed and stream_id must be nonnegative")
    return np.random.Generator(np.random.Philox(key=[seed, stream_id]))


def spawn(seed: int, n: int, base: int = 0) -> list[np.random.Generator]:
    """Return ``n`` independent streams ``stream(seed, base + i)``."""
    return [stream(seed, base + i) for i in range(n)]
