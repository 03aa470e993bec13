"""Deterministic seed derivation for reproducible runs.

Every random draw in the package flows through a numpy Generator whose seed
is derived from a master seed plus integer stream tags, so that a whole
pretrain/train/eval run is bit-reproducible given the master seed.
"""

import numpy as np

# Stream tags keep independent consumers of the master seed decorrelated.
SCENE = 1
SPLIT = 2
PARAMS_PRETRAIN = 3
PARAMS_TRAIN = 4
MASK_SPATIAL = 5
MASK_SPECTRAL = 6
PRETRAIN_SAMPLES = 7
BATCH_SHUFFLE = 8
PCA = 9


def derive(*entropy: int) -> int:
    """Fold integers into a single 64-bit seed."""
    state = np.random.SeedSequence(list(entropy)).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def generator(*entropy: int) -> np.random.Generator:
    """A PCG64 generator seeded from the given entropy integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))
