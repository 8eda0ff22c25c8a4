"""Classification metrics: accuracy, rank-based AUC and F1."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise MetricError("accuracy of an empty set is undefined")
    return float(np.mean(y_true == y_pred))


def midranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(y_true, scores, positive: int = 1) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with midranks for ties."""
    y = np.asarray(y_true) == positive
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        absent = positive if n_pos == 0 else f"not-{positive}"
        raise MetricError(f"AUC undefined: class {absent} is absent from the labels")
    r = midranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(y_true, proba, n_classes: int | None = None) -> float:
    """Binary AUC on the class-1 score, or one-vs-rest macro AUC for more classes.

    ``proba`` is (N,) positive-class scores or (N, K) class probabilities.
    """
    y = np.asarray(y_true)
    p = np.asarray(proba, dtype=np.float64)
    if p.ndim == 1:
        return binary_auc(y, p, positive=1)
    k = n_classes or p.shape[1]
    for c in range(k):
        if not np.any(y == c):
            raise MetricError(f"AUC undefined: class {c} is absent from the test labels")
    if k == 2:
        return binary_auc(y, p[:, 1], positive=1)
    return float(np.mean([binary_auc(y, p[:, c], positive=c) for c in range(k)]))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def f1(y_true, y_pred, n_classes: int = 2) -> float:
    """Positive-class (label 1) F1 for two classes, macro F1 otherwise."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    per_class = [
        _f1_from_counts(int(cm[c, c]), int(cm[:, c].sum() - cm[c, c]), int(cm[c, :].sum() - cm[c, c]))
        for c in range(n_classes)
    ]
    if n_classes == 2:
        return per_class[1]
    return float(np.mean(per_class))


@dataclass
class EvalReport:
    acc: float
    auc: float
    f1: float
    n_test: int
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    std: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def aggregate(cls, reports: list["EvalReport"], seeds: list[int]) -> "EvalReport":
        vals = {k: np.array([getattr(r, k) for r in reports]) for k in ("acc", "auc", "f1")}
        return cls(
            acc=float(vals["acc"].mean()),
            auc=float(vals["auc"].mean()),
            f1=float(vals["f1"].mean()),
            n_test=reports[0].n_test,
            seeds=list(seeds),
            std={k: float(v.std()) for k, v in vals.items()},
        )


def evaluate_predictions(y_true, proba, n_classes: int) -> EvalReport:
    y = np.asarray(y_true)
    p = np.asarray(proba, dtype=np.float64)
    if y.size == 0:
        raise MetricError("evaluation needs a non-empty test set")
    present = np.unique(y)
    if len(present) < 2:
        raise MetricError(f"evaluation needs at least two classes in the test set, found {present.tolist()}")
    pred = p.argmax(axis=1)
    cm = confusion_matrix(y, pred, n_classes)
    per_class = {}
    for c in range(n_classes):
        tp = int(cm[c, c])
        per_class[str(c)] = {
            "support": int(cm[c, :].sum()),
            "recall": float(tp / cm[c, :].sum()) if cm[c, :].sum() else 0.0,
            "f1": _f1_from_counts(tp, int(cm[:, c].sum() - tp), int(cm[c, :].sum() - tp)),
        }
    return EvalReport(
        acc=accuracy(y, pred),
        auc=auc(y, p, n_classes),
        f1=f1(y, pred, n_classes),
        n_test=int(y.size),
        per_class=per_class,
    )
