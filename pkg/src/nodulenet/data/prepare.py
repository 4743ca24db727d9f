"""Annotation + volume ingestion into a prepared dataset directory."""

from __future__ import annotations

from pathlib import Path

from .folds import make_folds
from .labeling import consensus_label, exclusion_reason, scan_exclusion_reason
from .patches import LARGE_SHAPE, SMALL_SHAPE, extract_patch_pair, normalize_hu
from .storage import read_annotations, read_volume, write_dataset

EXCLUSION_REASONS = ("excluded_few_raters", "excluded_median3", "excluded_nonuniform", "excluded_missing_slices")


def prepare_dataset(annotations, volumes_dir, out_dir, k: int = 5, seed: int = 0,
                    validation_fraction: float = 0.025, small_shape=SMALL_SHAPE, large_shape=LARGE_SHAPE) -> dict:
    """Label, filter and crop every annotated nodule; returns kept/excluded ids by reason.

    Volumes hold attenuation values and are normalized to [0, 1] before
    cropping. Folds are written to the index when at least ``k`` nodules
    survive.
    """
    records = read_annotations(annotations)
    excluded: dict[str, list[str]] = {r: [] for r in EXCLUSION_REASONS}
    volumes: dict[str, tuple] = {}
    pairs = []
    for rec in records:
        reason = exclusion_reason(rec.grades)
        if reason is not None:
            excluded[reason].append(rec.nodule_id)
            continue
        if rec.scan_id not in volumes:
            volumes[rec.scan_id] = read_volume(volumes_dir, rec.scan_id)
        volume, meta = volumes[rec.scan_id]
        rec.slice_thickness_mm = list(meta.get("thickness_mm", []))
        rec.slice_positions_mm = meta.get("slice_positions_mm")
        reason = scan_exclusion_reason(rec, depth=large_shape[2])
        if reason is not None:
            excluded[reason].append(rec.nodule_id)
            continue
        pair = extract_patch_pair(normalize_hu(volume), rec.center, small_shape, large_shape)
        pair.label = consensus_label(rec.grades).label
        pair.nodule_id = rec.nodule_id
        pairs.append(pair)

    folds = make_folds([p.nodule_id for p in pairs], k, seed, validation_fraction) if len(pairs) >= k else None
    summary = {
        "kept": [p.nodule_id for p in pairs],
        "excluded": excluded,
        "counts": {"annotated": len(records), "kept": len(pairs), **{r: len(v) for r, v in excluded.items()}},
    }
    if pairs:
        write_dataset(out_dir, pairs, folds=folds, excluded=excluded, source=str(Path(annotations).name))
    return summary
