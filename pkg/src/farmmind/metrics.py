"""Two-class (farmland / background) segmentation metrics.

``mAcc`` and ``mIoU`` average the per-class recall and IoU over the classes
whose denominator is non-zero; ``F1`` and ``Recall`` are for farmland, and
``F1`` is undefined when precision or recall is (or both are zero).  A
metric that cannot be computed is ``None``, never NaN.  Aggregation sums
confusion counts before computing metrics (micro averaging).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .raster import RasterError, as_binary

METRIC_NAMES = ("mAcc", "mIoU", "F1", "Recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = as_binary(pred).astype(bool), as_binary(gt).astype(bool)
    if pred.shape != gt.shape:
        raise RasterError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def metrics(c: ConfusionCounts) -> dict:
    recall_fg = _ratio(c.tp, c.tp + c.fn)
    recall_bg = _ratio(c.tn, c.tn + c.fp)
    iou_fg = _ratio(c.tp, c.tp + c.fp + c.fn)
    iou_bg = _ratio(c.tn, c.tn + c.fn + c.fp)
    precision = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if precision is not None and recall_fg is not None and precision + recall_fg > 0:
        f1 = 2 * precision * recall_fg / (precision + recall_fg)
    return {
        "mAcc": _mean([recall_fg, recall_bg]),
        "mIoU": _mean([iou_fg, iou_bg]),
        "F1": f1,
        "Recall": recall_fg,
    }


def aggregate(per_patch: Iterable[tuple[str, str, ConfusionCounts]]) -> dict:
    """Micro-averaged report from ``(patch_id, group, counts)`` rows."""
    groups: dict[str, ConfusionCounts] = {}
    members: dict[str, list[str]] = {}
    overall = ConfusionCounts()
    for patch_id, group, counts in per_patch:
        groups[group] = groups.get(group, ConfusionCounts()) + counts
        members.setdefault(group, []).append(patch_id)
        overall = overall + counts
    return {
        "groups": {
            g: {"patches": members[g], "counts": c.to_dict(), "metrics": metrics(c)}
            for g, c in sorted(groups.items())
        },
        "overall": {"patches": sum(len(m) for m in members.values()),
                    "counts": overall.to_dict(), "metrics": metrics(overall)},
    }


def report_rows(report: dict) -> list[dict]:
    rows = []
    sections = list(report["groups"].items()) + [("overall", report["overall"])]
    for name, sec in sections:
        row = {"group": name}
        row.update({k: sec["metrics"][k] for k in METRIC_NAMES})
        row.update(sec["counts"])
        rows.append(row)
    return rows


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    fields = ["group", *METRIC_NAMES, "tp", "fp", "fn", "tn"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in report_rows(report):
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in fields})
    return buf.getvalue()
