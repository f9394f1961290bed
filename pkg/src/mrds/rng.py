"""Deterministic per-stream random generators.

Every parallel unit of work (pixel, chain, sample block) owns a stream id and
derives its generator as stream(seed, stream_id). Philox is counter-based, so
draws depend only on (seed, stream_id, draw index), never on scheduling or
thread count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, stream_id: int) -> np.random.Generator:
    key = [int(seed) & _MASK64, int(stream_id) & _MASK64]
    return np.random.Generator(np.random.Philox(key=key))
