"""Group confusion counts and the accuracy/fairness metrics built on them."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptAnnotation, LengthMismatch, NonBinaryValue, UndefinedRate


@dataclass(frozen=True)
class GroupCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def tpr(self, group) -> float:
        if self.tp + self.fn == 0:
            raise UndefinedRate(f"group {group} has no positive-target samples")
        return self.tp / (self.tp + self.fn)

    def tnr(self, group) -> float:
        if self.tn + self.fp == 0:
            raise UndefinedRate(f"group {group} has no negative-target samples")
        return self.tn / (self.tn + self.fp)


@dataclass(frozen=True)
class GroupConfusion:
    g0: GroupCounts
    g1: GroupCounts

    @property
    def n(self) -> int:
        return self.g0.n + self.g1.n

    def tpr(self, group: int) -> float:
        return (self.g0, self.g1)[group].tpr(group)

    def tnr(self, group: int) -> float:
        return (self.g0, self.g1)[group].tnr(group)

    def swapped(self) -> "GroupConfusion":
        return GroupConfusion(self.g1, self.g0)


def _binary(a, name):
    arr = np.asarray(a)
    if arr.ndim != 1:
        raise LengthMismatch(f"{name} must be one-dimensional")
    if not np.isin(arr, (0, 1)).all():
        raise NonBinaryValue(f"{name} contains values other than 0/1")
    return arr.astype(np.int64)


def group_confusion(predictions, targets, groups) -> GroupConfusion:
    pred = _binary(predictions, "predictions")
    y = _binary(targets, "targets")
    g = _binary(groups, "groups")
    if not (len(pred) == len(y) == len(g)):
        raise LengthMismatch(f"lengths differ: {len(pred)}, {len(y)}, {len(g)}")
    if len(pred) == 0:
        raise LengthMismatch("N=0: nothing to evaluate")
    counts = []
    for grp in (0, 1):
        m = g == grp
        p, t = pred[m], y[m]
        counts.append(GroupCounts(
            tp=int(np.sum((p == 1) & (t == 1))),
            fp=int(np.sum((p == 1) & (t == 0))),
            tn=int(np.sum((p == 0) & (t == 0))),
            fn=int(np.sum((p == 0) & (t == 1))),
        ))
    return GroupConfusion(*counts)


def equal_opportunity(cm: GroupConfusion) -> float:
    return abs(cm.tpr(0) - cm.tpr(1))


def equalized_odds(cm: GroupConfusion) -> float:
    return 0.5 * (abs(cm.tpr(0) - cm.tpr(1)) + abs(cm.tnr(0) - cm.tnr(1)))


def equalized_accuracy(cm: GroupConfusion) -> float:
    """Mean of the four group-conditional rates; equals accuracy on a
    test set balanced over (target, group) cells."""
    return 0.25 * (cm.tpr(0) + cm.tnr(0) + cm.tpr(1) + cm.tnr(1))


def standard_accuracy(cm: GroupConfusion) -> float:
    if cm.n == 0:
        raise LengthMismatch("N=0: nothing to evaluate")
    return (cm.g0.tp + cm.g0.tn + cm.g1.tp + cm.g1.tn) / cm.n


@dataclass
class MetricReport:
    accuracy: float
    equalized_accuracy: float
    equal_opportunity: float
    equalized_odds: float

    def as_dict(self) -> dict:
        return asdict(self)

    def table_row(self) -> str:
        return (f"Acc {self.accuracy:.4f} | EAcc {self.equalized_accuracy:.4f} | "
                f"EOpp {self.equal_opportunity:.4f} | EOdds {self.equalized_odds:.4f}")


def metric_report(cm: GroupConfusion) -> MetricReport:
    return MetricReport(
        accuracy=standard_accuracy(cm),
        equalized_accuracy=equalized_accuracy(cm),
        equal_opportunity=equal_opportunity(cm),
        equalized_odds=equalized_odds(cm),
    )


def evaluate_predictions(predictions, targets, groups) -> MetricReport:
    return metric_report(group_confusion(predictions, targets, groups))


# ---------------------------------------------------------------------------
# prediction logs: CSV with columns sample_id,prediction,target,protected

PREDICTION_COLUMNS = ("sample_id", "prediction", "target", "protected")


def write_prediction_log(path, sample_ids, predictions, targets, protected) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for row in zip(sample_ids, predictions, targets, protected):
            w.writerow([row[0], int(row[1]), int(row[2]), int(row[3])])


def read_prediction_log(path):
    """Return ``(sample_ids, predictions, targets, protected)``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PREDICTION_COLUMNS:
            raise CorruptAnnotation(f"{path}: header must be {','.join(PREDICTION_COLUMNS)} (line 1)")
        ids, cols = [], [[], [], []]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise CorruptAnnotation(f"{path}: expected 4 fields at line {lineno}")
            ids.append(row[0])
            for c, v in zip(cols, row[1:]):
                try:
                    c.append(int(v))
                except ValueError:
                    raise NonBinaryValue(f"{path}: non-integer value {v!r} at line {lineno}") from None
    return ids, np.array(cols[0]), np.array(cols[1]), np.array(cols[2])


def write_metrics(path, report: MetricReport, **extra) -> None:
    Path(path).write_text(json.dumps({**extra, **report.as_dict()}, indent=2, sort_keys=True))
