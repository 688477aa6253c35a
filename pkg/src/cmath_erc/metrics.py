"""Accuracy, per-class and support-weighted F1 from a confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    weighted_f1: float
    per_class_f1: np.ndarray
    confusion: np.ndarray  # rows = true class, columns = predicted class
    support: np.ndarray

    def as_dict(self, class_names: list[str] | None = None) -> dict:
        out = {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class_f1": self.per_class_f1.tolist(),
            "support": self.support.tolist(),
            "confusion": self.confusion.tolist(),
        }
        if class_names is not None:
            out["class_names"] = list(class_names)
        return out


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= num_classes):
        raise ValueError("label outside [0, num_classes)")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("no evaluated utterances")
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    # F1 = 2tp / (2tp + fp + fn); a class never predicted nor present scores 0
    denom = pred_count + support
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    weighted = float(np.sum(support / total * f1))
    return Metrics(float(tp.sum() / total), weighted, f1, cm, support)


def compute_metrics(y_true, y_pred, num_classes: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))
