import logging
import math

import numpy as np

from ..config import SplitSpec
from ..errors import SplitError
from .sample import Sample

logger = logging.getLogger(__name__)


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """Train and test are floored; validation takes the remainder."""
    n_train = math.floor(n * spec.train + 1e-9)
    n_test = math.floor(n * spec.test + 1e-9)
    return n_train, n - n_train - n_test, n_test


def split(samples: list[Sample], spec: SplitSpec, seed: int = 42) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Stratified, deterministic partition into (train, val, test).

    Each category is shuffled, the categories are interleaved proportionally
    and the interleaved sequence is cut at the split sizes, so every split
    sees the categories in (close to) their overall ratio.
    """
    sizes = split_sizes(len(samples), spec)
    needed = sum(1 for s in sizes if s > 0)
    groups: dict[str, list[int]] = {}
    for idx, s in enumerate(samples):
        groups.setdefault(s.category.value, []).append(idx)
    for name, members in sorted(groups.items()):
        if len(members) < needed:
            raise SplitError(f"category {name} has {len(members)} samples, fewer than the {needed} non-empty splits")

    rng = np.random.default_rng(seed)
    keyed = []
    for rank, name in enumerate(sorted(groups)):
        members = np.array(groups[name])[rng.permutation(len(groups[name]))]
        for j, idx in enumerate(members):
            keyed.append(((j + 0.5) / len(members), rank, int(idx)))
    keyed.sort()
    order = [idx for _, _, idx in keyed]

    n_train, n_val, _ = sizes
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    logger.info("split %d samples into %d/%d/%d", len(samples), *sizes)
    return tuple([samples[i] for i in part] for part in parts)
