"""Per-trial seed derivation shared by every experiment runner."""

import numpy as np

SEED_RULE = "trial generator = numpy PCG64 seeded by numpy.random.SeedSequence([master_seed, trial_index])"


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))
