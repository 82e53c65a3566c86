"""Sliding Discriminant matrix and the categorical discriminant penalty.

Row Y of the matrix is an exponentially-weighted estimate of the model's
mean prediction distribution for class Y, updated per batch with rate
beta on the new value. The penalty sums, over classes present in a batch,
the JS divergence between the (constant) matrix row and that class's mean
batch prediction; gradient flows only into the predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import LOG_CLIP, validate_categorical
from .numcore import Var, value_of


@dataclass
class DiscriminantMatrix:
    """c x c matrix of per-class prediction-distribution estimates."""

    rows: np.ndarray
    beta: float
    update_count: int = 0

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        c = self.rows.shape[0]
        if self.rows.shape != (c, c) or c < 2:
            raise ValueError(f"matrix must be square with c >= 2, got shape {self.rows.shape}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.update_count < 0:
            raise ValueError(f"update_count must be >= 0, got {self.update_count}")
        for row in self.rows:
            validate_categorical(row)

    @property
    def n_classes(self) -> int:
        return self.rows.shape[0]


@dataclass
class ClassBatchPrediction:
    """Mean prediction distribution of one class within one batch."""

    class_label: int
    mean_prediction: object  # (c,) ndarray or tape Var
    support: int = 1

    def values(self) -> np.ndarray:
        return value_of(self.mean_prediction)


def init_matrix(n_classes: int, beta: float) -> DiscriminantMatrix:
    """Identity start: row Y is the one-hot vector at Y."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    return DiscriminantMatrix(np.eye(n_classes), beta)


def _check_preds(matrix: DiscriminantMatrix, preds: list[ClassBatchPrediction]) -> None:
    if not preds:
        raise ValueError("empty prediction list")
    labels = [p.class_label for p in preds]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate class labels in batch predictions: {labels}")
    for p in preds:
        if not 0 <= p.class_label < matrix.n_classes:
            raise ValueError(f"class label {p.class_label} outside [0, {matrix.n_classes})")
        if p.support < 1:
            raise ValueError(f"class {p.class_label} has support {p.support}")


def slide_update(matrix: DiscriminantMatrix, preds: list[ClassBatchPrediction]) -> DiscriminantMatrix:
    """Convex-combine rows for present classes; absent rows stay as-is.

    Runs outside the differentiation graph: prediction values are
    detached, so the matrix never carries gradient history.
    """
    _check_preds(matrix, preds)
    rows = matrix.rows.copy()
    for p in preds:
        mean = validate_categorical(p.values())
        rows[p.class_label] = (1.0 - matrix.beta) * rows[p.class_label] + matrix.beta * mean
    return DiscriminantMatrix(rows, matrix.beta, matrix.update_count + 1)


def cdr_penalty(matrix: DiscriminantMatrix, preds: list[ClassBatchPrediction]) -> Var:
    """Sum over present classes of js(matrix row, mean batch prediction).

    Matrix rows are constants; the returned scalar Var carries gradient
    with respect to the mean predictions (and anything they derive from).
    Logs are clipped at the same 1e-12 floor the divergence toolkit uses.
    """
    _check_preds(matrix, preds)
    total = None
    for p in preds:
        m = matrix.rows[p.class_label]
        q = p.mean_prediction if isinstance(p.mean_prediction, Var) else Var(p.mean_prediction)
        mid_log = ((q + m) * 0.5).clip_min(LOG_CLIP).log()
        # KL(m, mid): sum m ln m is a constant, zero entries contribute 0
        pos = m > 0.0
        m_entropy = float(np.sum(m[pos] * np.log(m[pos])))
        kl_m = m_entropy - (mid_log * m).sum()
        # KL(q, mid) with the q*ln(q) convention at q == 0
        kl_q = ((q.clip_min(LOG_CLIP).log() - mid_log) * q).sum()
        term = (kl_m + kl_q) * 0.5
        total = term if total is None else total + term
    return total


def group_by_class(batch_predictions, labels) -> list[ClassBatchPrediction]:
    """Mean prediction per class present in the batch, ordered by class.

    `batch_predictions` is a (batch, c) array or Var of per-sample
    prediction distributions; Var input keeps the means on the tape.
    """
    y = np.asarray(labels, dtype=np.int64)
    n = value_of(batch_predictions).shape[0]
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"got {n} predictions but {y.shape} labels")
    if n == 0:
        raise ValueError("empty batch")
    out = []
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        if isinstance(batch_predictions, Var):
            mean = batch_predictions.take_rows(idx).mean(axis=0)
        else:
            mean = np.asarray(batch_predictions, dtype=np.float64)[idx].mean(axis=0)
        out.append(ClassBatchPrediction(int(label), mean, support=idx.size))
    return out
