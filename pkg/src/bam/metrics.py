"""Per-task evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaskScore:
    task_id: str
    metric: str
    value: float


def _pair(pred, gold):
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gold.shape}")
    return pred, gold


def argmax_classes(probs):
    """Row argmax; ``np.argmax`` already breaks ties toward the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


def accuracy(pred, gold):
    pred, gold = _pair(pred, gold)
    if pred.size == 0:
        raise ValueError("accuracy of empty input")
    return float(np.mean(pred == gold))


def matthews_corr(pred, gold):
    pred, gold = _pair(pred, gold)
    for v in (pred, gold):
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("matthews_corr needs binary labels")
    tp = int(np.sum((pred == 1) & (gold == 1)))
    tn = int(np.sum((pred == 0) & (gold == 0)))
    fp = int(np.sum((pred == 1) & (gold == 0)))
    fn = int(np.sum((pred == 0) & (gold == 1)))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def average_ranks(v):
    """1-based ranks, ties sharing the mean of their positions."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_corr(pred, gold):
    pred, gold = _pair(pred, gold)
    if pred.size < 2:
        raise ValueError("spearman_corr needs at least two points")
    a = average_ranks(pred)
    b = average_ranks(gold)
    a -= a.mean()
    b -= b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0:
        return 0.0
    return max(-1.0, min(1.0, float(a @ b) / denom))


def average_score(scores):
    """Unweighted mean of per-task scores (a mapping or a sequence)."""
    values = list(scores.values()) if isinstance(scores, dict) else list(scores)
    if not values:
        raise ValueError("average_score of no tasks")
    return sum(values) / len(values)


def evaluate(model, dataset):
    """Dev-split score of ``model`` on ``dataset`` using the task's metric."""
    from .model import forward

    spec = dataset.spec
    out = forward(model, dataset.dev_x, spec.task_id)
    if spec.metric == "spearman":
        value = spearman_corr(model.denormalize(spec.task_id, out), dataset.dev_y)
    elif spec.metric == "matthews":
        value = matthews_corr(argmax_classes(out), dataset.dev_y.astype(int))
    else:
        value = accuracy(argmax_classes(out), dataset.dev_y.astype(int))
    return TaskScore(spec.task_id, spec.metric, value)
