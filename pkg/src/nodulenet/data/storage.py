"""On-disk formats: annotation CSV, raw volumes, and prepared dataset directories.

Prepared dataset layout::

    <dir>/index.json        records, class counts, patch shapes, fold assignment
    <dir>/patches/<id>.bin  small patch then large patch, little-endian float32
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import DataError, FormatError
from .folds import FoldAssignment
from .labeling import LABEL_NAMES, NoduleRecord
from .patches import PatchPair

INDEX_FORMAT = "nodulenet-dataset"
INDEX_VERSION = 1
ANNOTATION_FIELDS = ("nodule_id", "scan_id", "x", "y", "z")


def read_annotations(path) -> list[NoduleRecord]:
    """Parse ``nodule_id,scan_id,x,y,z,g1,...,gN``; errors name the 1-based data row."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty annotation file") from None
        grade_cols = header[len(ANNOTATION_FIELDS):]
        if tuple(header[: len(ANNOTATION_FIELDS)]) != ANNOTATION_FIELDS or not grade_cols or not all(
            c.startswith("g") for c in grade_cols
        ):
            raise DataError(f"{path}: header must be nodule_id,scan_id,x,y,z,g1,...; got {','.join(header)}")
        for row_num, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_num} has {len(row)} fields, expected {len(header)}")
            try:
                center = tuple(int(row[i]) for i in (2, 3, 4))
                grades = [int(g) for g in row[5:]]
            except ValueError:
                raise DataError(f"{path}: row {row_num} has a non-integer coordinate or grade") from None
            if any(not 0 <= g <= 5 for g in grades):
                raise DataError(f"{path}: row {row_num} has a grade outside 0..5")
            records.append(NoduleRecord(row[0].strip(), row[1].strip(), center, grades))
    return records


def write_annotations(path, records: Iterable[NoduleRecord], n_grades: int = 4) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(ANNOTATION_FIELDS) + [f"g{i}" for i in range(1, n_grades + 1)])
        for r in records:
            grades = list(r.grades) + [0] * (n_grades - len(r.grades))
            w.writerow([r.nodule_id, r.scan_id, *r.center, *grades])


def write_volume(directory, scan_id: str, volume: np.ndarray, thickness_mm: Sequence[float],
                 slice_positions_mm: Sequence[float] | None = None) -> None:
    """Raw little-endian float32 ``[x,y,z]`` row-major plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vol = np.asarray(volume, dtype="<f4")
    (directory / f"{scan_id}.raw").write_bytes(vol.tobytes(order="C"))
    meta = {"id": scan_id, "dims": list(vol.shape), "thickness_mm": [float(t) for t in thickness_mm]}
    if slice_positions_mm is not None:
        meta["slice_positions_mm"] = [float(p) for p in slice_positions_mm]
    (directory / f"{scan_id}.json").write_text(json.dumps(meta))


def read_volume(directory, scan_id: str) -> tuple[np.ndarray, dict]:
    directory = Path(directory)
    sidecar = directory / f"{scan_id}.json"
    raw = directory / f"{scan_id}.raw"
    if not sidecar.exists() or not raw.exists():
        raise DataError(f"volume {scan_id!r} not found in {directory}")
    try:
        meta = json.loads(sidecar.read_text())
        dims = tuple(int(d) for d in meta["dims"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{sidecar}: invalid sidecar ({exc})") from None
    data = np.frombuffer(raw.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{raw}: {data.size} values, sidecar dims {dims} need {int(np.prod(dims))}")
    return data.reshape(dims).astype(np.float32), meta


@dataclass
class Dataset:
    """Labeled patch pairs held as stacked ``[n, 1, X, Y, Z]`` float32 arrays."""

    ids: list[str]
    labels: np.ndarray
    small: np.ndarray
    large: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair]) -> "Dataset":
        if not pairs:
            raise DataError("dataset is empty")
        if any(p.label is None for p in pairs):
            raise DataError("every patch pair needs a label")
        return cls(
            ids=[p.nodule_id for p in pairs],
            labels=np.array([p.label for p in pairs], dtype=np.int64),
            small=np.stack([p.small for p in pairs])[:, None].astype(np.float32),
            large=np.stack([p.large for p in pairs])[:, None].astype(np.float32),
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def small_shape(self) -> tuple[int, int, int]:
        return tuple(self.small.shape[2:])

    @property
    def large_shape(self) -> tuple[int, int, int]:
        return tuple(self.large.shape[2:])

    def class_counts(self) -> dict[str, int]:
        n_mal = int(self.labels.sum())
        return {"benign": len(self) - n_mal, "malignant": n_mal}

    def subset(self, ids: Sequence[str]) -> "Dataset":
        pos = {i: k for k, i in enumerate(self.ids)}
        try:
            idx = np.array([pos[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown nodule id {exc.args[0]!r}") from None
        return Dataset([self.ids[k] for k in idx], self.labels[idx], self.small[idx], self.large[idx])


def write_dataset(directory, pairs: Sequence[PatchPair], folds: FoldAssignment | None = None,
                  excluded: dict | None = None, source: str = "") -> Path:
    directory = Path(directory)
    (directory / "patches").mkdir(parents=True, exist_ok=True)
    ds = Dataset.from_pairs(pairs)
    records = []
    for p in pairs:
        blob = np.concatenate([p.small.astype("<f4").ravel(), p.large.astype("<f4").ravel()])
        (directory / "patches" / f"{p.nodule_id}.bin").write_bytes(blob.tobytes())
        rec = {"id": p.nodule_id, "label": int(p.label), "label_name": LABEL_NAMES[int(p.label)]}
        if folds is not None:
            rec["fold"] = folds.fold_of[p.nodule_id]
        records.append(rec)
    index = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "source": source,
        "small_shape": list(ds.small_shape),
        "large_shape": list(ds.large_shape),
        "count": len(ds),
        "class_counts": ds.class_counts(),
        "records": records,
    }
    if folds is not None:
        index["folds"] = folds.to_json()
    if excluded is not None:
        index["excluded"] = excluded
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return directory


def read_index(directory) -> dict:
    path = Path(directory) / "index.json"
    if not path.exists():
        raise DataError(f"{directory}: no index.json")
    try:
        index = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if index.get("format") != INDEX_FORMAT or index.get("version") != INDEX_VERSION:
        raise FormatError(f"{path}: not a version-{INDEX_VERSION} {INDEX_FORMAT} index")
    return index


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    index = read_index(directory)
    small_shape = tuple(index["small_shape"])
    large_shape = tuple(index["large_shape"])
    n_small, n_large = int(np.prod(small_shape)), int(np.prod(large_shape))
    pairs = []
    for rec in index["records"]:
        path = directory / "patches" / f"{rec['id']}.bin"
        if not path.exists():
            raise DataError(f"missing patch file {path}")
        blob = np.frombuffer(path.read_bytes(), dtype="<f4")
        if blob.size != n_small + n_large:
            raise FormatError(f"{path}: {blob.size} values, expected {n_small + n_large}")
        pairs.append(PatchPair(
            small=blob[:n_small].reshape(small_shape),
            large=blob[n_small:].reshape(large_shape),
            label=int(rec["label"]),
            nodule_id=rec["id"],
        ))
    return Dataset.from_pairs(pairs)
