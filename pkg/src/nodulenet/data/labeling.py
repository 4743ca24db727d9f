"""Consensus labeling of radiologist malignancy grades and scan filtering."""

from __future__ import annotations

import enum
import statistics
from dataclasses import dataclass, field
from typing import Sequence

from ..errors import DataError

MIN_RATERS = 3
THICKNESS_TOLERANCE_MM = 1e-6


class Consensus(enum.Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"
    EXCLUDED = "excluded"

    @property
    def label(self) -> int:
        if self is Consensus.EXCLUDED:
            raise DataError("excluded nodules have no label")
        return 1 if self is Consensus.MALIGNANT else 0


LABEL_NAMES = {0: "benign", 1: "malignant"}


@dataclass
class NoduleRecord:
    """One annotated nodule. ``grades`` use 0 for an unavailable rating."""

    nodule_id: str
    scan_id: str
    center: tuple[int, int, int]
    grades: list[int]
    slice_thickness_mm: list[float] = field(default_factory=list)
    slice_positions_mm: list[float] | None = None


def _check_grades(grades: Sequence[int]) -> list[int]:
    out = []
    for g in grades:
        if int(g) != g or not 0 <= g <= 5:
            raise DataError(f"grade {g!r} outside 0..5")
        out.append(int(g))
    return out


def exclusion_reason(grades: Sequence[int]) -> str | None:
    """Why a nodule is excluded, or None if it gets a label."""
    rated = [g for g in _check_grades(grades) if g != 0]
    if len(rated) < MIN_RATERS:
        return "excluded_few_raters"
    if statistics.median(rated) == 3:
        return "excluded_median3"
    return None


def consensus_label(grades: Sequence[int]) -> Consensus:
    """Median of the non-zero grades: < 3 benign, > 3 malignant.

    Nodules with fewer than three ratings or a median of exactly 3 are
    excluded. Even counts use the mean of the central pair.
    """
    if exclusion_reason(grades) is not None:
        return Consensus.EXCLUDED
    median = statistics.median([g for g in grades if g != 0])
    return Consensus.BENIGN if median < 3 else Consensus.MALIGNANT


def scan_exclusion_reason(record: NoduleRecord, depth: int = 10) -> str | None:
    """``excluded_nonuniform`` / ``excluded_missing_slices`` or None.

    A slice is missing when consecutive slice positions inside the
    ``depth``-slice extraction window around the nodule are further apart than
    1.5 slice thicknesses.
    """
    thickness = record.slice_thickness_mm
    if not thickness:
        raise DataError(f"nodule {record.nodule_id}: no slice thickness information")
    if max(thickness) - min(thickness) > THICKNESS_TOLERANCE_MM:
        return "excluded_nonuniform"
    positions = record.slice_positions_mm
    if positions:
        z = record.center[2]
        start = z - ((depth + 1) // 2 - 1)
        window = positions[max(0, start) : max(0, start + depth)]
        step = thickness[0]
        for a, b in zip(window, window[1:]):
            if abs(b - a) > 1.5 * step:
                return "excluded_missing_slices"
    return None


def filter_scan(record: NoduleRecord, depth: int = 10) -> bool:
    """True if the nodule's scan has uniform thickness and no missing slices."""
    return scan_exclusion_reason(record, depth) is None
