"""Classification metrics, ROC analysis and the paired t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import betainc

from . import _kernels
from .errors import DimensionError, ParameterError, UndefinedMetricError


class RocResult(NamedTuple):
    auc: float
    points: list  # (fpr, tpr, threshold)


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ParameterError("labels must be 0 or 1")
    return y.astype(int)


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """ROC points from a sweep over distinct score thresholds, descending.

    The first point is (0, 0) at threshold +inf; each later point classifies
    ``score >= threshold`` as positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores vs {y.size} labels")
    npos = int(y.sum())
    nneg = y.size - npos
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("ROC/AUC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    pts = [(0.0, 0.0, math.inf)]
    pts += [(fp[i] / nneg, tp[i] / npos, float(s[last[i]])) for i in range(last.size)]
    return pts


def auc(scores, labels) -> RocResult:
    """Trapezoidal area under the threshold-sweep ROC curve.

    Tied scores form one diagonal segment, which is the half-credit rule of
    the pairwise formulation.
    """
    pts = roc_curve(scores, labels)
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(area, pts)


def auc_pairwise(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    return float(_kernels.auc_pairs(np.ascontiguousarray(pos), np.ascontiguousarray(neg)))


@dataclass
class ConfusionReport:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def confusion_metrics(pred_labels, true_labels) -> ConfusionReport:
    """Accuracy plus recall on each class; a recall with no support is None."""
    p, t = _binary(pred_labels), _binary(true_labels)
    if p.shape != t.shape:
        raise DimensionError(f"{p.size} predictions vs {t.size} labels")
    if p.size == 0:
        raise UndefinedMetricError("no predictions")
    tp = int(np.sum((p == 1) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    return ConfusionReport(
        accuracy=(tp + tn) / p.size,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


class TTestResult(NamedTuple):
    t: float
    p: float
    degenerate: bool = False


def student_t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided tail probability via the regularised incomplete beta function."""
    x = dof / (dof + t * t)
    return float(betainc(dof / 2.0, 0.5, x))


def paired_ttest(a, b) -> TTestResult:
    """Two-tailed paired t-test on ``a - b``.

    Zero-variance differences are degenerate: all-zero gives (0, 1), a
    constant nonzero shift gives (±inf, 0) with ``degenerate`` set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length 1-D, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ParameterError(f"paired t-test needs n >= 2, got {n}")
    d = a - b
    md = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if md == 0.0:
            return TTestResult(0.0, 1.0, False)
        return TTestResult(math.copysign(math.inf, md), 0.0, True)
    t = md / (sd / math.sqrt(n))
    return TTestResult(float(t), student_t_two_sided_p(t, n - 1), False)
