"""Pixel and building-level metrics with a NaN-free convention for empty classes.

A ratio whose denominator is zero is reported as 1 when the class it
concerns is absent from both prediction and ground truth, and 0 otherwise.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_masks(cls, pred, gt) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    accuracy: float
    f1: float
    iou0: float
    iou1: float
    miou: float
    n_buildings: int = 0
    n_pixels: int = 0
    defined: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int, absent_both: bool) -> float:
    if den:
        return num / den
    return 1.0 if absent_both else 0.0


def report_from_counts(c: ConfusionCounts, n_buildings: int = 0, n_pixels: int = 0) -> MetricsReport:
    pos_absent = c.tp + c.fp + c.fn == 0
    neg_absent = c.tn + c.fp + c.fn == 0
    iou1 = _ratio(c.tp, c.tp + c.fp + c.fn, pos_absent)
    iou0 = _ratio(c.tn, c.tn + c.fn + c.fp, neg_absent)
    return MetricsReport(
        precision=_ratio(c.tp, c.tp + c.fp, pos_absent),
        recall=_ratio(c.tp, c.tp + c.fn, pos_absent),
        accuracy=_ratio(c.tp + c.tn, c.total, True),
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, pos_absent),
        iou0=iou0,
        iou1=iou1,
        miou=(iou0 + iou1) / 2.0,
        n_buildings=n_buildings,
        n_pixels=n_pixels,
        defined=c.total > 0,
    )


def binarize(probabilities, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)


def pixel_metrics(pred, gt) -> MetricsReport:
    c = ConfusionCounts.from_masks(pred, gt)
    return report_from_counts(c, n_pixels=c.total)


@dataclass(frozen=True)
class BuildingDecision:
    building_id: int
    n_pixels: int
    positive_fraction: float
    damaged_fraction: float
    predicted_damaged: bool
    gt_damaged: bool


def building_decisions(probabilities, gt_mask, building_ids, threshold: float = 0.5) -> list[BuildingDecision]:
    """Majority vote of thresholded pixels inside every footprint (id > 0)."""
    ids = np.asarray(building_ids).astype(np.int64)
    pred = binarize(probabilities, threshold)
    gt = np.asarray(gt_mask).astype(bool)
    if not (ids.shape == pred.shape == gt.shape):
        raise ValueError(f"shape mismatch: ids {ids.shape}, probabilities {pred.shape}, gt {gt.shape}")
    flat = ids.ravel()
    if (flat < 0).any():
        raise ValueError("building ids must be non-negative")
    size = int(flat.max()) + 1 if flat.size else 1
    area = np.bincount(flat, minlength=size)
    pos = np.bincount(flat, weights=pred.ravel(), minlength=size)
    dmg = np.bincount(flat, weights=gt.ravel(), minlength=size)
    out = []
    for b in np.flatnonzero(area[1:]) + 1:
        pf, df = pos[b] / area[b], dmg[b] / area[b]
        out.append(BuildingDecision(int(b), int(area[b]), float(pf), float(df), bool(pf >= 0.5), bool(df >= 0.5)))
    return out


def building_counts(decisions: Iterable[BuildingDecision]) -> ConfusionCounts:
    tp = fp = fn = tn = 0
    for d in decisions:
        if d.predicted_damaged and d.gt_damaged:
            tp += 1
        elif d.predicted_damaged:
            fp += 1
        elif d.gt_damaged:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def building_level_metrics(probabilities, gt_mask, building_ids, threshold: float = 0.5) -> MetricsReport:
    decisions = building_decisions(probabilities, gt_mask, building_ids, threshold)
    c = building_counts(decisions)
    return report_from_counts(c, n_buildings=len(decisions), n_pixels=int(np.asarray(building_ids).size))


# -- emission --------------------------------------------------------------------

REPORT_FIELDS = ("precision", "recall", "accuracy", "f1", "iou0", "iou1", "miou", "n_buildings", "n_pixels", "defined")


def fmt(value) -> str:
    """Stable text form used in every emitted table."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".12g")


def reports_to_csv(rows: Iterable[tuple[str, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name",) + REPORT_FIELDS)
    for name, rep in rows:
        w.writerow([name] + [fmt(getattr(rep, f)) for f in REPORT_FIELDS])
    return buf.getvalue()


def reports_to_json(rows: Iterable[tuple[str, MetricsReport]]) -> str:
    return json.dumps({name: rep.to_dict() for name, rep in rows}, indent=2, sort_keys=True) + "\n"
