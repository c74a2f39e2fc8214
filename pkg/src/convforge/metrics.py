"""Evaluation metrics: confusion matrix, accuracy, precision/recall/F1, ROC-AUC.

Binary metrics are positive-class metrics; 0/0 ratios are pinned to 0.0.
AUC is the Mann-Whitney rank statistic with midrank tie handling, computed
in O(N log N); the O(N^2) pair-loop lives with the tests as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, UndefinedMetricError


def confusion(labels_true, labels_pred, num_classes: int) -> np.ndarray:
    """Counts matrix: entry [i][j] counts samples with true class i predicted as j."""
    t = np.asarray(labels_true, dtype=np.int64)
    p = np.asarray(labels_pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ArgumentError(f"label vectors must be 1-D and equal length: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise ArgumentError(f"labels out of range [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def accuracy(matrix: np.ndarray) -> float:
    total = int(matrix.sum())
    return float(np.trace(matrix)) / total if total else 0.0


def _binary_counts(matrix: np.ndarray, positive_class: int):
    tp = int(matrix[positive_class, positive_class])
    fn = int(matrix[positive_class].sum()) - tp
    fp = int(matrix[:, positive_class].sum()) - tp
    return tp, fp, fn


def precision(matrix: np.ndarray, positive_class: int) -> float:
    tp, fp, _ = _binary_counts(matrix, positive_class)
    return tp / (tp + fp) if tp + fp else 0.0


def recall(matrix: np.ndarray, positive_class: int) -> float:
    tp, _, fn = _binary_counts(matrix, positive_class)
    return tp / (tp + fn) if tp + fn else 0.0


def f1(matrix: np.ndarray, positive_class: int) -> float:
    p = precision(matrix, positive_class)
    r = recall(matrix, positive_class)
    return 2.0 * p * r / (p + r) if p + r else 0.0


def roc_auc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties counting 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ArgumentError(f"scores/labels must be 1-D and equal length: {s.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ArgumentError("labels must be 0/1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    order = np.argsort(s, kind="stable")
    sorted_scores = s[order]
    ranks = np.empty(y.size, dtype=np.float64)
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # midrank of the tied block, 1-based
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class EvalReport:
    """One model/dataset row: confusion counts plus the Table-style headline metrics."""

    confusion: np.ndarray
    accuracy: float
    precision_per_class: tuple[float, ...]
    recall_per_class: tuple[float, ...]
    f1_per_class: tuple[float, ...]
    auc: float | None
    positive_class: int
    n_samples: int

    @property
    def recall_positive(self) -> float:
        return self.recall_per_class[self.positive_class]

    @property
    def precision_positive(self) -> float:
        return self.precision_per_class[self.positive_class]

    @property
    def f1_positive(self) -> float:
        return self.f1_per_class[self.positive_class]

    def to_kv(self) -> str:
        c = self.confusion.shape[0]
        lines = [
            f"n_samples {self.n_samples}",
            f"num_classes {c}",
            f"positive_class {self.positive_class}",
            f"accuracy {self.accuracy!r}",
            f"auc {'nan' if self.auc is None else repr(self.auc)}",
        ]
        for i in range(c):
            lines.append(f"precision_{i} {self.precision_per_class[i]!r}")
            lines.append(f"recall_{i} {self.recall_per_class[i]!r}")
            lines.append(f"f1_{i} {self.f1_per_class[i]!r}")
        for i in range(c):
            for j in range(c):
                lines.append(f"confusion_{i}_{j} {int(self.confusion[i, j])}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_kv(text: str) -> "EvalReport":
        kv = {}
        for line in text.strip().splitlines():
            key, value = line.split(" ", 1)
            kv[key] = value
        c = int(kv["num_classes"])
        matrix = np.array([[int(kv[f"confusion_{i}_{j}"]) for j in range(c)] for i in range(c)],
                          dtype=np.int64)
        auc_raw = kv["auc"]
        return EvalReport(
            confusion=matrix,
            accuracy=float(kv["accuracy"]),
            precision_per_class=tuple(float(kv[f"precision_{i}"]) for i in range(c)),
            recall_per_class=tuple(float(kv[f"recall_{i}"]) for i in range(c)),
            f1_per_class=tuple(float(kv[f"f1_{i}"]) for i in range(c)),
            auc=None if auc_raw == "nan" else float(auc_raw),
            positive_class=int(kv["positive_class"]),
            n_samples=int(kv["n_samples"]),
        )


def report_from_predictions(labels_true, labels_pred, num_classes: int,
                            positive_class: int, scores=None) -> EvalReport:
    matrix = confusion(labels_true, labels_pred, num_classes)
    auc = None
    if scores is not None and num_classes == 2:
        auc = roc_auc(scores, np.asarray(labels_true) == positive_class)
    return EvalReport(
        confusion=matrix,
        accuracy=accuracy(matrix),
        precision_per_class=tuple(precision(matrix, k) for k in range(num_classes)),
        recall_per_class=tuple(recall(matrix, k) for k in range(num_classes)),
        f1_per_class=tuple(f1(matrix, k) for k in range(num_classes)),
        auc=auc,
        positive_class=positive_class,
        n_samples=int(matrix.sum()),
    )


def evaluate(model, dataset, batch_size: int = 64, positive_class: int | None = None) -> EvalReport:
    """Batched predict_proba over a dataset; positive class defaults to the 'pneumonia' label."""
    from . import models
    from .data import batches

    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    if positive_class is None:
        names = list(dataset.class_names)
        positive_class = names.index("pneumonia") if "pneumonia" in names else len(names) - 1
    preds, scores = [], []
    for batch in batches(dataset, batch_size, rng=None, shuffle=False):
        proba = models.predict_proba(model, batch.x).array
        preds.append(np.argmax(proba, axis=1))
        scores.append(proba[:, positive_class])
    labels_pred = np.concatenate(preds)
    scores = np.concatenate(scores)
    num_classes = model.config.num_classes
    return report_from_predictions(dataset.labels, labels_pred, num_classes,
                                   positive_class, scores if num_classes == 2 else None)
