"""Keyed random streams.

Every random draw in the package comes from a generator identified by
``(master_seed, domain, *indices)``.  Streams are derived with
:class:`numpy.random.SeedSequence` spawn keys, so replicate ``r`` always sees
the same numbers no matter which other replicates are generated, in which
order, or on which worker.
"""

from __future__ import annotations

import numpy as np

# stream domains
FBM = 0
W_LIMIT = 1
AUX = 2


def stream(seed: int, domain: int, *indices: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = (int(domain),) + tuple(int(i) for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
