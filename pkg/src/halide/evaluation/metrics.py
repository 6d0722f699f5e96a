"""Support-weighted one-vs-rest classification metrics over predicted action distributions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .. import DataError

METRIC_NAMES = ("acc", "rec", "prec", "f1", "auc", "apr", "jaccard")


@dataclass
class Metrics:
    acc: float
    rec: float
    prec: float
    f1: float
    auc: float  # nan when fewer than two classes occur
    apr: float
    jaccard: float
    n: int = 0

    def values(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_NAMES]

    def to_json(self) -> dict:
        return asdict(self)


def roc_auc_binary(y: np.ndarray, s: np.ndarray) -> float:
    """Mann-Whitney form of the ROC area; tied scores take their midrank."""
    pos = y.astype(bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    r = rankdata(s)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision_binary(y: np.ndarray, s: np.ndarray) -> float:
    """Sum over distinct score thresholds of (recall increment) x precision.

    Tied scores enter as one threshold.
    """
    pos = y.astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], pos[order]
    # last index of every block of equal scores
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[last]
    precision = tp / (last + 1.0)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def _as_arrays(y_true, probs) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true, dtype=np.int64).reshape(-1)
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if len(y) == 0:
        raise DataError("no prediction records")
    if P.shape[0] != len(y):
        raise DataError(f"{len(y)} labels but {P.shape[0]} predicted distributions")
    if y.min() < 0 or y.max() >= P.shape[1]:
        raise DataError("true action outside the predicted distribution's range")
    return y, P


def compute_metrics(y_true: Sequence[int], probs: np.ndarray) -> Metrics:
    """Accuracy plus support-weighted recall, precision, F1, ROC area, average precision and Jaccard.

    Hard predictions are the argmax of each distribution (lowest action id on
    ties). Classes are weighted by their share of true labels, so classes that
    never occur carry no weight.
    """
    y, P = _as_arrays(y_true, probs)
    n, A = P.shape
    pred = np.argmax(P, axis=1)
    support = np.bincount(y, minlength=A).astype(np.float64)
    tp = np.bincount(y[pred == y], minlength=A).astype(np.float64)
    n_pred = np.bincount(pred, minlength=A).astype(np.float64)
    fp, fn = n_pred - tp, support - tp

    def ratio(num, den):
        return np.divide(num, den, out=np.zeros(A), where=den > 0)

    rec_k = ratio(tp, support)
    prec_k = ratio(tp, n_pred)
    f1_k = ratio(2 * tp, 2 * tp + fp + fn)
    jac_k = ratio(tp, tp + fp + fn)
    wts = support / n

    present = np.flatnonzero(support > 0)
    if len(present) >= 2:
        auc = sum(wts[k] * roc_auc_binary(y == k, P[:, k]) for k in present)
        apr = sum(wts[k] * average_precision_binary(y == k, P[:, k]) for k in present)
    else:
        auc = apr = math.nan
    return Metrics(float(np.mean(pred == y)), float(wts @ rec_k), float(wts @ prec_k),
                   float(wts @ f1_k), float(auc), float(apr), float(wts @ jac_k), n)


def metrics_from_records(records: Iterable[Mapping]) -> Metrics:
    """Metrics from prediction records with ``action`` and ``probs`` fields."""
    recs = list(records)
    if not recs:
        raise DataError("no prediction records")
    probs = np.array([r["probs"] for r in recs], dtype=np.float64)
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > 1e-9)
    if bad.size:
        raise DataError(f"record {int(bad[0])}: predicted distribution does not sum to 1")
    return compute_metrics([r["action"] for r in recs], probs)


def summarize(per_fold: Sequence[Metrics]) -> tuple[dict[str, float], dict[str, float]]:
    """Mean and population standard deviation of every metric over folds."""
    if not per_fold:
        raise DataError("no folds to summarize")
    M = np.array([m.values() for m in per_fold], dtype=np.float64)
    return dict(zip(METRIC_NAMES, M.mean(axis=0).tolist())), dict(zip(METRIC_NAMES, M.std(axis=0).tolist()))
