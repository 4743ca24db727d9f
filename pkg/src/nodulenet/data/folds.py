"""Seeded k-fold partitioning with a validation holdout inside each training split."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: dict[str, int]
    validation_fraction: float
    seed: int = 0

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.fold_of.items() if f == fold)

    def sizes(self) -> list[int]:
        return [len(self.fold_ids(f)) for f in range(self.k)]

    def split(self, fold: int) -> tuple[list[str], list[str], list[str]]:
        """``(train, validation, test)`` ids for one fold; the three are disjoint.

        The validation holdout is ``ceil(validation_fraction * n)`` (at least
        one) of the ``n`` non-test ids, drawn with a seed derived from
        ``(seed, fold)``.
        """
        if not 0 <= fold < self.k:
            raise ConfigurationError(f"fold {fold} out of range for k={self.k}")
        test = self.fold_ids(fold)
        rest = sorted(i for i, f in self.fold_of.items() if f != fold)
        n_val = validation_size(len(rest), self.validation_fraction)
        order = np.random.default_rng([self.seed, fold]).permutation(len(rest))
        val = sorted(rest[i] for i in order[:n_val])
        held = set(val)
        train = [i for i in rest if i not in held]
        return train, val, test

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
            "fold_of": dict(sorted(self.fold_of.items())),
        }


def validation_size(n: int, fraction: float) -> int:
    return min(n - 1, max(1, math.ceil(fraction * n - 1e-9)))


def make_folds(ids: Sequence[str], k: int, seed: int, validation_fraction: float) -> FoldAssignment:
    """Assign ids to ``k`` folds round-robin over a seeded shuffle of the sorted ids."""
    ids = sorted(set(ids))
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    if k > len(ids):
        raise ConfigurationError(f"k={k} folds requested for only {len(ids)} ids")
    if not 0 <= validation_fraction < 1:
        raise ConfigurationError(f"validation_fraction must be in [0, 1), got {validation_fraction}")
    order = np.random.default_rng(seed).permutation(len(ids))
    fold_of = {ids[j]: pos % k for pos, j in enumerate(order)}
    return FoldAssignment(k, fold_of, float(validation_fraction), int(seed))
