"""Pixel confusion counts, the six overlap metrics, and fold aggregation."""

from __future__ import annotations

import csv
import statistics
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError

METRIC_NAMES = ("accuracy", "jaccard", "precision", "recall", "specificity", "dice")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    jaccard: float
    precision: float
    recall: float
    specificity: float
    dice: float

    def as_tuple(self) -> tuple:
        return astuple(self)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class FoldAggregate:
    """Per-metric (mean, std); std is the population std over fold means."""

    mean: MetricsReport
    std: MetricsReport
    n_folds: int


def threshold(prob, t: float = 0.5) -> np.ndarray:
    """Binary uint8 mask, foreground where ``prob >= t``."""
    if not 0.0 <= t <= 1.0:
        raise ConfigurationError(f"threshold must lie in [0, 1], got {t}")
    prob = np.asarray(getattr(prob, "data", prob))
    return (prob >= t).astype(np.uint8)


def _as_binary(mask, name) -> np.ndarray:
    arr = np.asarray(getattr(mask, "data", mask))
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} mask is not binary (values outside {{0, 1}})")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"confusion: pred shape {p.shape} != gt shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    """Six overlap ratios.

    Degenerate cases: when prediction and ground truth are both empty,
    jaccard, precision, recall and dice are 1.0; when exactly one is empty
    those ratios come out as 0.0 (or are defined as 0.0 when the denominator
    vanishes). Specificity is 1.0 when there are no negatives.
    """
    if c.total <= 0:
        raise ValueError("confusion counts cover no pixels")
    both_empty = c.tp + c.fp + c.fn == 0
    overlap_default = 1.0 if both_empty else 0.0
    return MetricsReport(
        accuracy=(c.tp + c.tn) / c.total,
        jaccard=_ratio(c.tp, c.tp + c.fp + c.fn, overlap_default),
        precision=_ratio(c.tp, c.tp + c.fp, overlap_default),
        recall=_ratio(c.tp, c.tp + c.fn, overlap_default),
        specificity=_ratio(c.tn, c.tn + c.fp, 1.0),
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, overlap_default),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("cannot average an empty list of reports")
    # statistics.fmean is correctly rounded, so identical inputs average to themselves
    return MetricsReport(*(statistics.fmean(col) for col in zip(*(r.as_tuple() for r in reports))))


def std_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Population standard deviation (divide by n), computed exactly then rounded."""
    if not reports:
        raise ValueError("cannot take the spread of an empty list of reports")
    return MetricsReport(*(statistics.pstdev(col) for col in zip(*(r.as_tuple() for r in reports))))


def aggregate_folds(per_fold: Sequence[Sequence[MetricsReport]]) -> FoldAggregate:
    """Average per image within each fold, then mean and population std over folds."""
    if not per_fold:
        raise ValueError("aggregate_folds needs at least one fold")
    for i, fold in enumerate(per_fold):
        if not fold:
            raise ValueError(f"fold {i} has no evaluated images")
    fold_means = [mean_report(fold) for fold in per_fold]
    return FoldAggregate(mean=mean_report(fold_means), std=std_report(fold_means), n_folds=len(per_fold))


CSV_HEADER = ("kind", "fold", "id") + METRIC_NAMES


def write_metrics_csv(path, rows: Iterable[tuple]) -> None:
    """Write per-image rows plus a summary block.

    ``rows`` yields ``(fold, sample_id, MetricsReport)``. Summary rows carry
    kind ``fold_mean``/``fold_std`` (across images of one fold),
    ``overall_mean``/``overall_std`` (across fold means; the headline figure)
    and ``image_mean``/``image_std`` (across all images pooled).
    """
    rows = list(rows)
    by_fold: dict = {}
    for fold, _, rep in rows:
        by_fold.setdefault(fold, []).append(rep)

    def fmt(rep):
        return [f"{v:.6f}" for v in rep.as_tuple()]

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for fold, sid, rep in rows:
            w.writerow(["image", fold, sid, *fmt(rep)])
        if not rows:
            return
        for fold in sorted(by_fold):
            reps = by_fold[fold]
            w.writerow(["fold_mean", fold, "", *fmt(mean_report(reps))])
            w.writerow(["fold_std", fold, "", *fmt(std_report(reps))])
        agg = aggregate_folds([by_fold[f] for f in sorted(by_fold)])
        w.writerow(["overall_mean", "all", "", *fmt(agg.mean)])
        w.writerow(["overall_std", "all", "", *fmt(agg.std)])
        pooled = [rep for _, _, rep in rows]
        w.writerow(["image_mean", "all", "", *fmt(mean_report(pooled))])
        w.writerow(["image_std", "all", "", *fmt(std_report(pooled))])


def read_metrics_csv(path) -> list:
    """Rows of the metrics CSV as dicts, metric columns converted to float."""
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            for name in METRIC_NAMES:
                row[name] = float(row[name])
            out.append(row)
        return out
