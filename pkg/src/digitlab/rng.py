"""Named RNG streams.

Every random draw in the lab goes through a generator obtained here, keyed by
(seed, stream name), so that two streams derived from the same training seed
never share state.
"""

from __future__ import annotations

import zlib

import numpy as np

# Fixed seed used for probe folds, donor selection and bootstrap resampling.
ANALYSIS_SEED = 20260517

STREAMS = ("split", "init", "dropout", "shuffle", "donor", "fold", "bootstrap")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a generator for the named stream.

    ``extra`` integers (e.g. an epoch index) further specialise the stream.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(x) for x in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
