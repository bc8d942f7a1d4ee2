"""Evaluation metrics: accuracy, RMSE and rank-based average precision."""
from __future__ import annotations

import numpy as np

from .classifiers import softmax
from .errors import EmptyEvalError


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if truth.size == 0:
        raise EmptyEvalError("no labeled samples to evaluate")
    return float(np.mean(pred.astype(np.int64) == truth.astype(np.int64)))


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if truth.size == 0:
        raise EmptyEvalError("no labeled samples to evaluate")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def average_precision(scores, positive, sample_ids=None) -> float:
    """Mean of the precision measured at the rank of every positive.

    Ranking is by descending score with ties broken by ascending sample id
    (row order when ids are not given).
    """
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    if scores.size == 0:
        raise EmptyEvalError("no samples to rank")
    ids = np.arange(scores.size) if sample_ids is None else np.asarray(sample_ids)
    order = np.lexsort((ids, -scores))
    hits = positive[order]
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise EmptyEvalError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def class_probabilities(S, n_classes) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[1] == 1 and n_classes == 2:
        return softmax(np.hstack([-S / 2.0, S / 2.0]))
    return softmax(S)


def mean_average_precision(S, truth, n_classes, sample_ids=None) -> float:
    """AP of class 1 for binary tasks; mean one-vs-rest AP over present classes otherwise."""
    P = class_probabilities(S, n_classes)
    truth = np.asarray(truth).astype(np.int64)
    if n_classes == 2:
        return average_precision(P[:, 1], truth == 1, sample_ids)
    aps = [average_precision(P[:, c], truth == c, sample_ids) for c in range(n_classes) if np.any(truth == c)]
    if not aps:
        raise EmptyEvalError("no positives for any class")
    return float(np.mean(aps))


def task_metric(spec, S, labels, truth, sample_ids=None) -> float:
    if spec.metric == "accuracy":
        return accuracy(labels, truth)
    if spec.metric == "rmse":
        return rmse(labels, truth)
    return mean_average_precision(S, truth, spec.n_classes, sample_ids)


def higher_is_better(metric: str) -> bool:
    return metric != "rmse"


def confusion_matrix(pred, truth, n_classes) -> np.ndarray:
    """Rows are ground-truth classes, columns predicted classes."""
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return m
