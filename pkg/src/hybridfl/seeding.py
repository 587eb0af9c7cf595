"""Deterministic RNG stream derivation.

Every random stream in a run is derived from one master seed through
``numpy.random.SeedSequence`` entropy tuples::

    (master_seed, stream_tag, round, client_id)

so a stream depends only on *what* it is for, never on how many draws other
streams have made. This is what lets two algorithm variants share client
minibatch draws bit-for-bit even when one of them does extra server work.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are part of the reproducibility contract; do not renumber.
CLIENT_SAMPLING = 1
SERVER_DRAW = 2
CLIENT_TRAIN = 3
SERVER_GRADIENT = 4
SERVER_TRAIN = 5
MODEL_INIT = 6
PARTITION = 7
SYNTHETIC = 8
ESTIMATION = 9


def derive_rng(master_seed: int, tag: int, *keys: int) -> np.random.Generator:
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(tag)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
