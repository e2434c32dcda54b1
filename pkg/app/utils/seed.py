import random
from typing import Sequence

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    """Seeds python, numpy and torch; switches torch to deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    RNG for one (seed, epoch, sample, ...) tuple.
    Independent of call order and of worker count.
    """
    entropy: Sequence[int] = [int(seed)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
