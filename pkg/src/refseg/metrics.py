"""Segmentation scores: per-sample IoU, precision at IoU thresholds, overall IoU.

Precision counts samples whose IoU is strictly above the threshold. Overall IoU
is cumulative (total intersection over total union), not a mean of per-sample
IoUs.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import BadThreshold, EmptyGroundTruth, EmptyList, ShapeMismatch

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
REPORT_KEYS = ("prec_05", "prec_06", "prec_07", "prec_08", "prec_09", "overall_iou")


@dataclass(frozen=True)
class IoUStat:
    intersection: int
    union: int

    @property
    def value(self) -> float:
        return self.intersection / self.union


def iou(pred, gt):
    """``(IoUStat, value)`` for two binary masks of equal shape."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred > 0
    g = gt > 0
    if not g.any():
        raise EmptyGroundTruth("ground-truth mask is empty")
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    stat = IoUStat(inter, union)
    return stat, stat.value


def precision_at(ious, threshold: float) -> float:
    ious = list(ious)
    if not ious:
        raise EmptyList("no IoU values")
    if not 0.0 < threshold < 1.0:
        raise BadThreshold(f"threshold must lie in (0, 1), got {threshold}")
    return sum(1 for v in ious if v > threshold) / len(ious)


def overall_iou(stats) -> float:
    stats = list(stats)
    if not stats:
        raise EmptyList("no IoU statistics")
    return sum(s.intersection for s in stats) / sum(s.union for s in stats)


def mean_iou(stats) -> float:
    """Mean of per-sample IoUs, kept only for contrast with ``overall_iou``."""
    stats = list(stats)
    if not stats:
        raise EmptyList("no IoU statistics")
    return float(sum(Fraction(s.intersection, s.union) for s in stats) / len(stats))


@dataclass
class MetricsReport:
    n: int
    prec: dict  # threshold -> fraction
    overall_iou: float

    @classmethod
    def from_stats(cls, stats):
        values = [s.value for s in stats]
        return cls(
            n=len(stats),
            prec={t: precision_at(values, t) for t in THRESHOLDS},
            overall_iou=overall_iou(stats),
        )

    def as_dict(self) -> dict:
        d = {"n": self.n}
        for t, key in zip(THRESHOLDS, REPORT_KEYS):
            d[key] = self.prec[t]
        d["overall_iou"] = self.overall_iou
        return d

    def to_json(self) -> str:
        # repr-based float formatting round-trips exactly
        return json.dumps(self.as_dict())

    def row(self, label: str, width: int = 28) -> str:
        cells = [f"{100 * self.prec[t]:6.2f}%" for t in THRESHOLDS]
        cells.append(f"{100 * self.overall_iou:6.2f}%")
        return f"{label:<{width}}| " + " | ".join(cells)


def table_header(width: int = 28) -> str:
    cols = [f"prec@{t}" for t in THRESHOLDS] + ["overall IoU"]
    return f"{'Method':<{width}}| " + " | ".join(f"{c:>7}" for c in cols)


def format_table(rows, width: int = 28) -> str:
    """Plain-text table of ``(label, MetricsReport)`` rows."""
    lines = [table_header(width), "-" * len(table_header(width))]
    lines += [report.row(label, width) for label, report in rows]
    return "\n".join(lines) + "\n"


def evaluate(predict_fn, samples, jobs: int = 1) -> MetricsReport:
    """Score ``predict_fn(image, expression) -> mask`` over ``samples`` in order.

    Per-sample work may run on ``jobs`` threads; the reduction is over integer
    counts in sample order, so the report does not depend on ``jobs``.
    """
    samples = list(samples)
    if not samples:
        raise EmptyList("no samples to evaluate")

    def one(s):
        mask = predict_fn(s.image, s.expression)
        return iou(mask, s.gt_mask)[0]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            stats = list(pool.map(one, samples))
    else:
        stats = [one(s) for s in samples]
    return MetricsReport.from_stats(stats)
