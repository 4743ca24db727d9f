"""Confusion-matrix rates, ROC curves and AUC.

A sample is predicted positive when ``score >= threshold``. The ROC sweep
groups equal scores into one step, which makes the trapezoidal area identical
to the Mann-Whitney estimate (ties count one half).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ScoredSample:
    nodule_id: str
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ContractError(f"score for {self.nodule_id!r} is not finite")
        if self.label not in (0, 1):
            raise ContractError(f"label for {self.nodule_id!r} must be 0 or 1")


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def _arrays(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise ContractError("no samples to evaluate")
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return scores, labels


def confusion_metrics(samples: Sequence[ScoredSample], threshold: float = 0.5) -> dict:
    """Counts and rates; a rate whose denominator is zero is reported as None."""
    scores, labels = _arrays(samples)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return {
        "tp": tp, "fp": fp, "tn": tn, "fn": fn,
        "tpr": _ratio(tp, tp + fn),
        "tnr": _ratio(tn, tn + fp),
        "ppv": _ratio(tp, tp + fp),
        "acc": (tp + tn) / len(samples),
    }


@dataclass
class RocCurve:
    thresholds: list[float]
    fpr: list[float]
    tpr: list[float]

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


def roc_curve(samples: Sequence[ScoredSample]) -> tuple[RocCurve, float]:
    """ROC over every distinct score threshold (descending) and its trapezoidal AUC.

    The curve starts at ``(0, 0)`` with threshold ``+inf`` and ends at ``(1, 1)``.
    """
    scores, labels = _arrays(samples)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(1 - y)[ends]]
    # integer trapezoid: exact up to the final division
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    curve = RocCurve(
        thresholds=[math.inf] + s[ends].tolist(),
        fpr=(fp / n_neg).tolist(),
        tpr=(tp / n_pos).tolist(),
    )
    return curve, auc


def roc_auc(samples: Sequence[ScoredSample]) -> tuple[list[tuple[float, float]], float]:
    curve, auc = roc_curve(samples)
    return curve.points, auc


def mann_whitney_auc(samples: Sequence[ScoredSample]) -> float:
    """Literal double loop over (positive, negative) pairs; ties count 1/2."""
    pos = [s.score for s in samples if s.label == 1]
    neg = [s.score for s in samples if s.label == 0]
    if not pos or not neg:
        raise ContractError("Mann-Whitney AUC needs both classes")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


@dataclass
class EvalReport:
    n: int
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float | None
    tnr: float | None
    ppv: float | None
    acc: float
    auc: float | None
    threshold: float = 0.5
    roc_thresholds: list[float] = field(default_factory=list)
    roc_points: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["roc_thresholds"] = [t if math.isfinite(t) else "inf" for t in self.roc_thresholds]
        d["roc_points"] = [list(p) for p in self.roc_points]
        return d

    def summary_line(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        return (f"n={self.n} acc={fmt(self.acc)} auc={fmt(self.auc)} "
                f"tpr={fmt(self.tpr)} tnr={fmt(self.tnr)} ppv={fmt(self.ppv)}")


def evaluate(samples: Sequence[ScoredSample], threshold: float = 0.5) -> EvalReport:
    """Full report; AUC and ROC are absent when only one class is present."""
    cm = confusion_metrics(samples, threshold)
    labels = {s.label for s in samples}
    curve, auc = (roc_curve(samples) if labels == {0, 1} else (None, None))
    return EvalReport(
        n=len(samples), threshold=threshold, auc=auc,
        roc_thresholds=curve.thresholds if curve else [],
        roc_points=curve.points if curve else [],
        **cm,
    )


def write_report(path, report: EvalReport, extra: dict | None = None) -> None:
    doc = report.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def write_roc_csv(path, report: EvalReport) -> None:
    lines = ["threshold,fpr,tpr"]
    for t, (f, r) in zip(report.roc_thresholds, report.roc_points):
        lines.append(f"{'inf' if math.isinf(t) else repr(float(t))},{f!r},{r!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def roc_svg(curves: dict[str, EvalReport], size: int = 320) -> str:
    """A self-contained SVG line plot of one or more ROC curves."""
    pad = 40
    span = size - 2 * pad
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def xy(f, t):
        return pad + f * span, size - pad - t * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="white" stroke="black"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#bbb" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">True positive rate</text>',
    ]
    for i, (name, rep) in enumerate(curves.items()):
        if not rep.roc_points:
            continue
        color = palette[i % len(palette)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(f, t) for f, t in rep.roc_points))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        label = f"{name} (AUC {rep.auc:.3f})" if rep.auc is not None else name
        parts.append(f'<text x="{pad + 8}" y="{pad + 16 + 14 * i}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_roc_svg(path, curves: dict[str, EvalReport]) -> None:
    Path(path).write_text(roc_svg(curves))
