"""Seedable counter-based random streams.

All randomness in the package flows through Philox (a 64-bit counter-based
generator), keyed by a user seed plus a small integer substream id. Distinct
substreams are statistically independent, so workers can draw from disjoint
streams without coordination and every run is reproducible from its seeds.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, substream: int = 0) -> np.random.Generator:
    """Return the Philox generator for (seed, substream).

    The same pair always yields the same stream; different pairs yield
    independent streams.
    """
    key = np.array([seed & _MASK64, substream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
