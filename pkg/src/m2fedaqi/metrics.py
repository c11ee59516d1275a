"""Regression and classification metrics.

Macro averaging throughout. An undefined R^2 (constant targets with a
non-zero residual) is reported as ``None`` rather than a number.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError

KEYS = ("mae", "rmse", "r2", "accuracy", "macro_f1", "macro_auc", "n")


@dataclass
class MetricsReport:
    task: str
    n: int
    mae: float | None = None
    rmse: float | None = None
    r2: float | None = None
    accuracy: float | None = None
    macro_f1: float | None = None
    macro_auc: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"task": d["task"], **{k: d[k] for k in KEYS}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d.get(k) for k in ("task",) + KEYS})

    def headline(self) -> float | None:
        return self.accuracy if self.task == "classification" else self.r2


def regression_metrics(y, y_hat) -> MetricsReport:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0:
        raise DataError("regression metrics need at least one sample")
    if y.shape != y_hat.shape:
        raise DataError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    if not (np.isfinite(y).all() and np.isfinite(y_hat).all()):
        raise DataError("regression metrics need finite values")
    err = y - y_hat
    ss_res = float(np.sum(err * err))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else None
    return MetricsReport(
        task="regression",
        n=int(y.size),
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(ss_res / y.size)),
        r2=r2,
    )


def roc_auc(is_positive, scores) -> float:
    """Area under the ROC curve by trapezoids over every distinct threshold.

    Tied scores form a single ROC step, which is what credits a tie as half a
    concordant pair.
    """
    pos = np.asarray(is_positive, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC AUC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(pos)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def f1_per_class(labels, preds, classes) -> dict:
    out = {}
    for c in classes:
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out[int(c)] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return out


def classification_metrics(labels, probs, num_classes: int | None = None) -> MetricsReport:
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=np.float64)
    if labels.size == 0:
        raise DataError("classification metrics need at least one sample")
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise DataError(f"probability matrix shape {probs.shape} does not match {labels.size} labels")
    c = num_classes or probs.shape[1]
    if probs.shape[1] != c:
        raise DataError(f"expected {c} probability columns, got {probs.shape[1]}")
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise DataError("probability rows must be finite and non-negative")
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > 1e-5)
    if bad.size:
        raise DataError(f"probability row {int(bad[0])} does not sum to 1")
    if (labels < 0).any() or (labels >= c).any():
        raise DataError(f"labels must lie in 0..{c - 1}")
    labels = labels.astype(np.int64)

    preds = np.argmax(probs, axis=1)  # first maximum wins ties
    accuracy = float(np.mean(preds == labels))
    present = np.union1d(labels, preds)
    macro_f1 = float(np.mean(list(f1_per_class(labels, preds, present).values())))

    aucs = []
    for k in np.unique(labels):
        positive = labels == k
        if positive.all():
            continue
        aucs.append(roc_auc(positive, probs[:, k]))
    macro_auc = float(np.mean(aucs)) if aucs else None
    return MetricsReport(
        task="classification",
        n=int(labels.size),
        accuracy=accuracy,
        macro_f1=macro_f1,
        macro_auc=macro_auc,
    )


def weighted_mean_reports(reports, weights) -> MetricsReport:
    """Combine per-client reports with a weighted arithmetic mean per metric.

    Metrics a client could not define (``None``) are left out of that
    metric's average; the result is ``None`` only when no client defined it.
    """
    reports = list(reports)
    weights = np.asarray(list(weights), dtype=np.float64)
    if not reports:
        raise DataError("no reports to combine")
    out = MetricsReport(task=reports[0].task, n=int(sum(r.n for r in reports)))
    for key in ("mae", "rmse", "r2", "accuracy", "macro_f1", "macro_auc"):
        vals = [(getattr(r, key), w) for r, w in zip(reports, weights) if getattr(r, key) is not None]
        if vals:
            v, w = np.array(vals, dtype=np.float64).T
            setattr(out, key, float(np.sum(v * w) / np.sum(w)))
    return out
