"""Classification metrics and the report tables built on them.

Prediction rule everywhere: positive iff ``score >= threshold``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from reacfuse import kernels

DEFAULT_BUCKET_EDGES = tuple(range(0, 3001, 200)) + (math.inf,)


class LengthMismatch(ValueError):
    pass


class UndefinedMetric(ValueError):
    pass


class SingleClass(ValueError):
    pass


class EmptySubset(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class MetricReport:
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    roc_auc: float | None = None
    n: int = 0
    subset: str = "all"

    def __post_init__(self):
        if self.balanced_accuracy != (self.sensitivity + self.specificity) / 2:
            raise ValueError("balanced_accuracy must equal (sensitivity + specificity) / 2")
        for name in ("sensitivity", "specificity", "roc_auc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_row(self):
        return asdict(self)


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.shape} scores vs {labels.shape} labels")
    return scores, labels.astype(int)


def confusion(scores, labels, threshold=0.5) -> ConfusionCounts:
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int((pred & pos).sum()), fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()), fn=int((~pred & pos).sum()),
    )


def metrics(c: ConfusionCounts, roc_auc=None, subset="all") -> MetricReport:
    if c.tp + c.fn == 0 or c.tn + c.fp == 0:
        raise UndefinedMetric("single-class slice: sensitivity or specificity undefined")
    sens = c.tp / (c.tp + c.fn)
    spec = c.tn / (c.tn + c.fp)
    return MetricReport(sens, spec, (sens + spec) / 2, roc_auc, c.n, subset)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    scores, labels = _check(scores, labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise SingleClass("ROC AUC needs both classes")
    return float(kernels.mann_whitney_auc(scores, labels == 1))


def report(scores, labels, threshold=0.5, subset="all") -> MetricReport:
    return metrics(confusion(scores, labels, threshold), roc_auc(scores, labels), subset)


def safe_report(scores, labels, threshold=0.5) -> dict:
    """Metric dict that degrades to NaN instead of raising on single-class data."""
    try:
        r = report(scores, labels, threshold)
        return {"sensitivity": r.sensitivity, "specificity": r.specificity,
                "balanced_accuracy": r.balanced_accuracy, "roc_auc": r.roc_auc}
    except (UndefinedMetric, SingleClass):
        nan = float("nan")
        return {"sensitivity": nan, "specificity": nan, "balanced_accuracy": nan, "roc_auc": nan}


def threshold_sweep(scores, labels, grid):
    """[(threshold, MetricReport without AUC)] for an ascending grid."""
    grid = list(grid)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted ascending")
    return [(t, metrics(confusion(scores, labels, t))) for t in grid]


def length_bucket_report(texts, scores, labels, edges=DEFAULT_BUCKET_EDGES, threshold=0.5,
                         hist_cutoff=3000, hist_bins=30):
    """Per-length-bucket metrics plus a character-length histogram.

    Buckets are half-open ``[edges[k], edges[k+1])`` over character counts.
    Each row holds ``n``, mean true label, mean predicted label and either a
    MetricReport or the marker ``"undefined"`` for single-class buckets.
    Empty buckets are kept with ``n == 0`` and marker ``"empty"``.
    """
    lengths = np.array([len(t) for t in texts])
    scores, labels = _check(scores, labels)
    if lengths.shape != labels.shape:
        raise LengthMismatch("texts and labels differ in length")
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (lengths >= lo) & (lengths < hi)
        n = int(sel.sum())
        row = {"lo": lo, "hi": hi, "n": n}
        if n == 0:
            row.update(mean_label=None, mean_predicted=None, report="empty")
        else:
            row["mean_label"] = float(labels[sel].mean())
            row["mean_predicted"] = float((scores[sel] >= threshold).mean())
            try:
                row["report"] = metrics(confusion(scores[sel], labels[sel], threshold))
            except UndefinedMetric:
                row["report"] = "undefined"
        rows.append(row)
    clipped = lengths[lengths <= hist_cutoff]
    counts, bin_edges = np.histogram(clipped, bins=hist_bins, range=(0, hist_cutoff))
    return rows, {"counts": counts.tolist(), "edges": bin_edges.tolist(),
                  "n_above_cutoff": int((lengths > hist_cutoff).sum())}


def subset_report(tags_per_record, tag, scores, labels, threshold=0.5) -> MetricReport:
    sel = np.array([tag in tags for tags in tags_per_record], dtype=bool)
    if not sel.any():
        raise EmptySubset(f"no record carries tag {tag!r}")
    scores, labels = _check(scores, labels)
    return report(scores[sel], labels[sel], threshold, subset=tag)


def label_histogram(probs, n_bins=10) -> np.ndarray:
    """Counts over ``n_bins`` equal bins of [0, 1]; bins are [a, b) except the last."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    p = np.asarray(probs, dtype=np.float64)
    prod = p * n_bins
    idx = np.floor(prod).astype(np.int64)
    # p * n_bins can round onto an edge from below; settle those exactly
    near = np.abs(prod - np.rint(prod)) <= 4 * np.finfo(np.float64).eps * np.maximum(prod, 1.0)
    for i in np.flatnonzero(near):
        idx[i] = math.floor(Fraction(float(p[i])) * n_bins)
    return np.bincount(np.minimum(idx, n_bins - 1), minlength=n_bins)


# -- serialisation -----------------------------------------------------------

REPORT_COLUMNS = ("model", "subset", "n", "sensitivity", "specificity", "balanced_accuracy", "roc_auc")


def reports_to_csv(rows) -> str:
    """``rows``: iterable of (model name, MetricReport)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for name, r in rows:
        w.writerow([name, r.subset, r.n, repr(r.sensitivity), repr(r.specificity),
                    repr(r.balanced_accuracy), "" if r.roc_auc is None else repr(r.roc_auc)])
    return buf.getvalue()


def reports_to_json(rows) -> str:
    return json.dumps([{"model": name, **r.as_row()} for name, r in rows], indent=2, sort_keys=True)


def sweep_to_csv(curves) -> str:
    """``curves``: {model name: [(threshold, MetricReport)]}."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "threshold", "sensitivity", "specificity", "balanced_accuracy"))
    for name, curve in curves.items():
        for t, r in curve:
            w.writerow([name, repr(float(t)), repr(r.sensitivity), repr(r.specificity),
                        repr(r.balanced_accuracy)])
    return buf.getvalue()


def buckets_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("lo", "hi", "n", "mean_label", "mean_predicted", "sensitivity", "specificity",
                "balanced_accuracy", "marker"))
    for row in rows:
        rep = row["report"]
        if isinstance(rep, MetricReport):
            vals, marker = [rep.sensitivity, rep.specificity, rep.balanced_accuracy], ""
        else:
            vals, marker = ["", "", ""], rep
        w.writerow([row["lo"], row["hi"], row["n"], row["mean_label"], row["mean_predicted"], *vals, marker])
    return buf.getvalue()


def histogram_to_csv(counts) -> str:
    n = len(counts)
    lines = ["bin_lo,bin_hi,count"]
    lines += [f"{k / n!r},{(k + 1) / n!r},{int(c)}" for k, c in enumerate(counts)]
    return "\n".join(lines) + "\n"
