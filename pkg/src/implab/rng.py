"""Project-wide random streams.

Every stochastic choice (initialization, data order, augmentation, label
corruption, subset draws) pulls from a Philox counter-based generator keyed by
a seed plus a path of integers, so streams are independent, splittable and
replay bit-exactly across platforms.
"""

import numpy as np

# Stream tags keep unrelated consumers of the same user seed apart.
INIT = 1
ORDER = 2
AUGMENT = 3
CORRUPT = 4
SUBSET = 5
SYNTH = 6
PROBE = 7


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Return a Philox generator for ``seed`` and an integer stream path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(p) & 0xFFFFFFFFFFFFFFFF for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path: int) -> int:
    """Derive a child integer seed; used when a seed must be stored in a file."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(p) for p in path])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
