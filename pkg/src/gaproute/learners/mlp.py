"""Feed-forward network trained by mini-batch gradient descent.

One tanh hidden layer by default. The regression head is linear with mean
squared error; the classification head is a sigmoid with binary cross-entropy
for one output and softmax with cross-entropy otherwise. Gradients are
analytic; `loss_and_gradients` exposes them for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .forest import TASK_CLASSIFY, TASK_REGRESS

_EPS = 1e-12


@dataclass(frozen=True)
class MLPConfig:
    hidden_sizes: tuple[int, ...] = (128,)
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def snapshot(self) -> dict[str, Any]:
        return {
            "hidden_sizes": list(self.hidden_sizes),
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }


class TrainingDiverged(RuntimeError):
    pass


def _init_layers(
    sizes: Sequence[int], rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        layers.append((rng.normal(0.0, scale, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class MLPModel:
    kind = "mlp"
    task: str
    roster: tuple[str, ...]
    classes: tuple[Any, ...] | None
    input_dim: int
    layers: list[tuple[np.ndarray, np.ndarray]]
    config: dict[str, Any] = field(default_factory=dict)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(
                f"embedding dim {X.shape[1]} does not match model dim {self.input_dim}"
            )
        return X

    def _forward(self, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        hidden = []
        out = X
        for W, b in self.layers[:-1]:
            out = np.tanh(out @ W + b)
            hidden.append(out)
        W, b = self.layers[-1]
        return hidden, out @ W + b

    def predict_raw(self, X: np.ndarray) -> np.ndarray:
        """Head output: identity for regression, probabilities for classify."""
        single = np.asarray(X).ndim == 1
        X = self._check(X)
        _, z = self._forward(X)
        if self.task == TASK_CLASSIFY:
            z = 1.0 / (1.0 + np.exp(-z)) if z.shape[1] == 1 else _softmax(z)
        return z[0] if single else z

    def predict(self, X: np.ndarray) -> np.ndarray:
        single = np.asarray(X).ndim == 1
        raw = self.predict_raw(X)
        if self.task == TASK_REGRESS:
            return raw
        raw2 = raw[None, :] if single else raw
        if raw2.shape[1] == 1:
            idx = (raw2[:, 0] >= 0.5).astype(int)
        else:
            idx = np.argmax(raw2, axis=1)
        labels = np.asarray(self.classes, dtype=object)[idx]
        return labels[0] if single else labels

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.task != TASK_CLASSIFY:
            raise ValueError("predict_proba is for classifiers")
        raw = self.predict_raw(X)
        if raw.ndim == 1:
            return np.array([1.0 - raw[0], raw[0]]) if raw.shape[0] == 1 else raw
        if raw.shape[1] == 1:
            return np.column_stack([1.0 - raw[:, 0], raw[:, 0]])
        return raw

    def loss_and_gradients(
        self, X: np.ndarray, Y: np.ndarray
    ) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
        """Loss plus analytic d(loss)/d(param) for every layer.

        Regression: mean over batch and outputs of squared error.
        Classification: mean cross-entropy (sigmoid for one output column,
        softmax otherwise).
        """
        X = self._check(X)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        batch = X.shape[0]
        hidden, z = self._forward(X)

        if self.task == TASK_REGRESS:
            diff = z - Y
            loss = float(np.mean(diff * diff))
            delta = 2.0 * diff / diff.size
        elif z.shape[1] == 1:
            p = 1.0 / (1.0 + np.exp(-z))
            loss = float(
                -np.mean(Y * np.log(p + _EPS) + (1.0 - Y) * np.log(1.0 - p + _EPS))
            )
            delta = (p - Y) / p.size
        else:
            p = _softmax(z)
            loss = float(-np.mean(np.sum(Y * np.log(p + _EPS), axis=1)))
            delta = (p - Y) / batch

        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)  # type: ignore[list-item]
        activations = [X] + hidden
        for layer in range(len(self.layers) - 1, -1, -1):
            a_prev = activations[layer]
            grads[layer] = (a_prev.T @ delta, delta.sum(axis=0))
            if layer > 0:
                W, _ = self.layers[layer]
                delta = (delta @ W.T) * (1.0 - hidden[layer - 1] ** 2)
        return loss, grads


def train_mlp(
    X: np.ndarray,
    targets: np.ndarray | Sequence[Any],
    config: MLPConfig | None = None,
    task: str = TASK_REGRESS,
    roster: Sequence[str] = (),
    classes: Sequence[Any] | None = None,
) -> MLPModel:
    """Seeded mini-batch gradient descent; raises TrainingDiverged naming the
    epoch if the loss stops being finite. Zero epochs returns the seeded
    initialization untouched."""
    cfg = config or MLPConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-d")
    n, d = X.shape
    if not np.isfinite(X).all():
        raise ValueError("non-finite training values")

    class_list: tuple[Any, ...] | None = None
    if task == TASK_CLASSIFY:
        raw = np.asarray(targets)
        if raw.ndim == 1:
            labels = list(raw)
            if classes is None:
                class_list = tuple(sorted(set(labels)))
            else:
                class_list = tuple(classes)
            if len(class_list) == 2:
                index = {c: i for i, c in enumerate(class_list)}
                Y = np.array([[float(index[label])] for label in labels])
            else:
                index = {c: i for i, c in enumerate(class_list)}
                Y = np.zeros((n, len(class_list)))
                for row, label in enumerate(labels):
                    Y[row, index[label]] = 1.0
        else:
            Y = raw.astype(np.float64)  # already one-hot
            class_list = tuple(classes) if classes is not None else tuple(range(Y.shape[1]))
    else:
        Y = np.asarray(targets, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
    if Y.shape[0] != n:
        raise ValueError("X and target row counts differ")

    rng = np.random.default_rng(cfg.seed)
    sizes = [d, *cfg.hidden_sizes, Y.shape[1]]
    model = MLPModel(
        task=task,
        roster=tuple(roster) if roster else (),
        classes=class_list,
        input_dim=d,
        layers=_init_layers(sizes, rng),
        config=cfg.snapshot(),
    )

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            loss, grads = model.loss_and_gradients(X[rows], Y[rows])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
            for (W, b), (gW, gb) in zip(model.layers, grads):
                W -= cfg.learning_rate * gW
                b -= cfg.learning_rate * gb
    return model
