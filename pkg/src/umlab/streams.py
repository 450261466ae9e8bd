"""Counter-based random streams.

Every stochastic operation in the package draws from a `numpy.random.Generator`
built here from a hierarchical integer/string key, so results depend only on
the key path (e.g. ``(seed, "batch", epoch, episode)``) and never on call
order, thread scheduling, or global state.
"""

from __future__ import annotations

import zlib

import numpy as np

_MOD = 2**64


def _to_entropy(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) % _MOD


def substream(*key: int | str) -> np.random.Generator:
    """Return a generator keyed by `key`.

    The same key always yields the same stream; distinct keys yield
    statistically independent streams (Philox counter-based generator
    seeded through `SeedSequence`).
    """
    if not key:
        raise ValueError("substream key must be non-empty")
    entropy = [_to_entropy(part) for part in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
