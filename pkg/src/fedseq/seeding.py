"""Deterministic stream derivation from a single master seed.

Every random draw in the package comes from a generator keyed by
(master_seed, purpose tag, *indices). Streams are therefore independent
of scheduling order: two clients training concurrently consume disjoint,
reproducible streams.
"""

import numpy as np

# Purpose tags; values are arbitrary but frozen.
TAG_CLASS_MEANS = 101
TAG_CLASS_SAMPLES = 102
TAG_PARTITION = 103
TAG_ROTATION = 104
TAG_SPLIT = 105
TAG_ADAPTER_INIT = 201
TAG_BACKBONE = 202
TAG_SHUFFLE = 203
TAG_LEARNER_INIT = 301


def stream(master_seed: int, tag: int, *indices: int) -> np.random.Generator:
    """A fresh generator for (master_seed, tag, indices)."""
    return np.random.default_rng([int(master_seed), int(tag), *[int(i) for i in indices]])
