"""Regressor validation metrics over labeled examples."""

from __future__ import annotations

from typing import Any, Mapping, Sequence

import numpy as np

from ..jury import LabeledExample


def examples_to_arrays(
    examples: Sequence[LabeledExample], roster: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([np.asarray(e.embedding, dtype=np.float64) for e in examples])
    Y = np.stack([[e.target.scores[m] for m in roster] for e in examples])
    return X, Y


def top_two(pred: np.ndarray) -> tuple[int, int]:
    """Indices of the two largest entries, roster order on ties."""
    order = np.argsort(-pred, kind="stable")
    return int(order[0]), int(order[1])


def evaluate_regressor(
    model: Any, examples: Sequence[LabeledExample]
) -> dict[str, float]:
    """avg_mse, top1_acc, and top1or2_acc over a validation set.

    All argmax tie-breaks resolve to the earlier roster index.
    """
    if not examples:
        raise ValueError("validation set is empty")
    roster = model.roster
    X, Y = examples_to_arrays(examples, roster)
    pred = model.predict(X)

    diff = pred - Y
    avg_mse = float(np.mean(np.mean(diff * diff, axis=1)))

    top1 = 0
    top1or2 = 0
    for row in range(len(examples)):
        actual_best = int(np.argmax(Y[row]))
        first, second = top_two(pred[row])
        if first == actual_best:
            top1 += 1
        if actual_best in (first, second):
            top1or2 += 1
    n = len(examples)
    return {
        "avg_mse": avg_mse,
        "top1_acc": top1 / n,
        "top1or2_acc": top1or2 / n,
    }
