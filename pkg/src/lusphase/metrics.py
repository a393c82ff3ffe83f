"""Confusion-matrix metrics with COVID as the positive class."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DomainError, ShapeError

COVID, NON_COVID = 1, 0

METRIC_FIELDS = ("accuracy", "precision_covid", "precision_non", "recall_covid",
                 "recall_non", "f1_covid", "f1_non")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DomainError(f"negative counts in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self) -> "ConfusionMatrix":
        """The same tally seen with the other class as positive."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


@dataclass
class MetricReport:
    """Metrics as fractions in [0, 1]. ``flags`` names metrics that were 0/0."""
    accuracy: float
    precision_covid: float
    precision_non: float
    recall_covid: float
    recall_non: float
    f1_covid: float
    f1_non: float
    support: int = 0
    flags: list[str] = field(default_factory=list)

    def as_percentages(self) -> dict[str, float]:
        return {k: round(100.0 * getattr(self, k), 2) for k in METRIC_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(preds, labels, positive: int = COVID) -> ConfusionMatrix:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise ShapeError(f"{preds.size} predictions vs {labels.size} labels")
    for name, arr in (("predictions", preds), ("labels", labels)):
        if np.any((arr != 0) & (arr != 1)):
            raise ShapeError(f"{name} must be class ids in {{0, 1}}")
    p = preds == positive
    t = labels == positive
    return ConfusionMatrix(tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
                           tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t)))


def _ratio(num: int, den: int, name: str, flags: list[str]) -> Fraction:
    if den == 0:
        flags.append(name)
        return Fraction(0)
    return Fraction(num, den)


def exact_metrics(cm: ConfusionMatrix) -> tuple[dict[str, Fraction], list[str]]:
    """Rational-valued metrics and the list of 0/0 cases (reported as 0)."""
    if cm.total == 0:
        raise DomainError("cannot summarize an empty confusion matrix")
    flags: list[str] = []
    out = {"accuracy": Fraction(cm.tp + cm.tn, cm.total)}
    for suffix, (tp, fp, fn) in (("covid", (cm.tp, cm.fp, cm.fn)), ("non", (cm.tn, cm.fn, cm.fp))):
        out[f"precision_{suffix}"] = _ratio(tp, tp + fp, f"precision_{suffix}", flags)
        out[f"recall_{suffix}"] = _ratio(tp, tp + fn, f"recall_{suffix}", flags)
        out[f"f1_{suffix}"] = _ratio(2 * tp, 2 * tp + fp + fn, f"f1_{suffix}", flags)
    return out, flags


def summarize(cm: ConfusionMatrix) -> MetricReport:
    values, flags = exact_metrics(cm)
    return MetricReport(**{k: float(v) for k, v in values.items()}, support=cm.total, flags=flags)


def aggregate_folds(reports: list[MetricReport]) -> MetricReport:
    """Unweighted mean over folds."""
    if not reports:
        raise DomainError("no fold reports to aggregate")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_FIELDS}
    flags = sorted({f for r in reports for f in r.flags})
    return MetricReport(**means, support=sum(r.support for r in reports), flags=flags)


def write_report_csv(path, fold_reports: list[MetricReport], mean: MetricReport | None = None) -> None:
    """One row per fold plus a final ``mean`` row; values in percent, 2 decimals."""
    if mean is None:
        mean = aggregate_folds(fold_reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", *METRIC_FIELDS, "support", "flags"])
        rows = [(str(i), r) for i, r in enumerate(fold_reports)] + [("mean", mean)]
        for label, r in rows:
            pct = r.as_percentages()
            w.writerow([label, *(f"{pct[k]:.2f}" for k in METRIC_FIELDS), r.support, ";".join(r.flags)])


def write_report_json(path, fold_reports: list[MetricReport], mean: MetricReport | None = None) -> None:
    if mean is None:
        mean = aggregate_folds(fold_reports)
    doc = {"aggregation": "unweighted mean over folds",
           "folds": [r.to_dict() for r in fold_reports], "mean": mean.to_dict()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
