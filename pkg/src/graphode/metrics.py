"""Classification and graph-forecast metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class SingleClassError(ValueError):
    """AUROC and threshold metrics need both classes present."""


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min(initial=1) == y.max(initial=0):
        raise SingleClassError("metric undefined: labels contain a single class")
    return s, y


def compute_auroc(scores, labels) -> float:
    """Mann-Whitney form: P(s+ > s-) + 0.5 P(s+ == s-), via average ranks."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _confusion_at(s: np.ndarray, y: np.ndarray, threshold: float) -> tuple[float, float, float]:
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    acc = float(np.mean(pred == (y == 1)))
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return f1, acc, recall


def compute_f1_acc_recall(scores, labels, threshold_policy: str | float = "optimal") -> tuple[float, float, float]:
    """(f1, accuracy, recall) with prediction ``score >= threshold``.

    ``"optimal"`` sweeps every distinct score as threshold, from the highest
    down, and keeps the first one reaching the maximal F1. A number (for
    instance 0.5) fixes the threshold.
    """
    s, y = _check_binary(scores, labels)
    if threshold_policy != "optimal":
        return _confusion_at(s, y, float(threshold_policy))
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # only the last index of each run of equal scores is a valid cut
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp, fp = tp[last], fp[last]
    n_pos = int(y.sum())
    fn = n_pos - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    best = int(np.argmax(f1))
    acc = (tp[best] + (len(y) - n_pos - fp[best])) / len(y)
    return float(f1[best]), float(acc), float(tp[best] / n_pos)


def cosine_rows(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Cosine similarity of matching rows; rows where either side is zero are dropped."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, pred.shape[-1])
    t = np.asarray(truth, dtype=np.float64).reshape(-1, truth.shape[-1])
    pn, tn = np.linalg.norm(p, axis=1), np.linalg.norm(t, axis=1)
    keep = (pn > 0) & (tn > 0)
    return np.sum(p[keep] * t[keep], axis=1) / (pn[keep] * tn[keep])


@dataclass
class MetricsReport:
    auroc: float
    f1: float
    accuracy: float
    recall: float
    gji: float | None = None
    cosine_similarity: float | None = None
    nfe: int = 0
    wall_seconds: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
