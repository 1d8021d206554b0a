"""Confusion matrices, per-class IoU and grouped mIoU reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import IGNORE_INDEX

logger = logging.getLogger(__name__)


class ConfusionMatrix:
    """``counts[g, p]``: pixels with ground truth ``g`` predicted as ``p``."""

    def __init__(self, n_classes: int, ignore_index: int = IGNORE_INDEX, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        keep = gt != self.ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= self.n_classes or p.min() < 0 or p.max() >= self.n_classes):
            raise ValueError(f"class ids must lie in 0..{self.n_classes - 1}")
        self.counts += np.bincount(g * self.n_classes + p, minlength=self.n_classes**2).reshape(
            self.n_classes, self.n_classes
        )
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.n_classes, self.ignore_index, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.ignore_index, self.counts.copy())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.update(pred, gt)


def merge(*cms: ConfusionMatrix) -> ConfusionMatrix:
    out = cms[0].copy()
    for cm in cms[1:]:
        out = out + cm
    return out


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where a class is absent from both GT and prediction."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(ious: np.ndarray, classes: Iterable[int] | None = None) -> float:
    """Mean over defined IoUs of ``classes`` (all classes if None); NaN if none defined."""
    vals = np.asarray(ious, dtype=np.float64)
    if classes is not None:
        vals = vals[list(classes)]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def _num(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


@dataclass
class GroupedReport:
    class_names: list[str]
    per_class: dict[int, float | None]  # None = absent from GT and prediction
    groups: dict[str, float | None]
    group_members: dict[str, list[int]] = field(default_factory=dict)
    step: int | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "class_names": list(self.class_names),
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "groups": dict(self.groups),
            "group_members": {k: list(v) for k, v in self.group_members.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupedReport":
        return cls(
            list(d["class_names"]),
            {int(k): v for k, v in d["per_class"].items()},
            dict(d["groups"]),
            {k: list(v) for k, v in d.get("group_members", {}).items()},
            d.get("step"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> list[list[str]]:
        step = "" if self.step is None else str(self.step)
        rows = []
        for c, v in self.per_class.items():
            rows.append([step, "class", str(c), self.class_names[c], "" if v is None else f"{v:.6f}"])
        for name, v in self.groups.items():
            rows.append([step, "group", name, name, "" if v is None else f"{v:.6f}"])
        return rows

    def to_csv(self) -> str:
        return reports_to_csv([self])


CSV_HEADER = ["step", "kind", "key", "name", "iou"]


def reports_to_csv(reports: Sequence[GroupedReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerows(r.csv_rows())
    return buf.getvalue()


def grouped_report(
    cm: ConfusionMatrix,
    groups: Mapping[str, Sequence[int]],
    class_names: Sequence[str] | None = None,
    step: int | None = None,
) -> GroupedReport:
    """Per-class IoU plus the mean IoU of each named group (insertion order kept).

    Empty groups are dropped with a warning; a group whose classes are all
    undefined reports None.
    """
    ious = iou_per_class(cm)
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.n_classes)]
    members: dict[str, list[int]] = {}
    for name, ids in groups.items():
        ids = list(ids)
        if not ids:
            logger.warning("report group %r is empty; omitted", name)
            continue
        bad = [c for c in ids if not 0 <= c < cm.n_classes]
        if bad:
            raise ValueError(f"group {name!r} references invalid class ids {bad}")
        members[name] = ids
    listed = sorted({c for ids in members.values() for c in ids})
    per_class = {c: _num(ious[c]) for c in listed}
    means = {name: _num(miou(ious, ids)) for name, ids in members.items()}
    return GroupedReport(names, per_class, means, members, step)
