"""Closed-form multi-output ridge regression.

Solves (Xc'Xc + lambda*I) W = Xc'Y on column-centered data, which leaves the
intercept unpenalized: b = y_mean - x_mean @ W. Prediction is x @ W + b.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


@dataclass(frozen=True)
class RidgeConfig:
    lam: float = 1.0

    def snapshot(self) -> dict[str, Any]:
        return {"lambda": self.lam}


@dataclass(eq=False)
class RidgeRegressor:
    kind = "ridge"
    roster: tuple[str, ...]
    input_dim: int
    weights: np.ndarray
    intercept: np.ndarray
    config: dict[str, Any] = field(default_factory=dict)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(
                f"embedding dim {X.shape[1]} does not match model dim {self.input_dim}"
            )
        out = X @ self.weights + self.intercept
        return out[0] if single else out


def train_ridge(
    X: np.ndarray,
    Y: np.ndarray,
    lam: float = 1.0,
    roster: Sequence[str] = (),
) -> RidgeRegressor:
    """Fit the closed-form ridge solution on centered data.

    X is n x d, Y is n x M (one score column per roster expert). lambda must
    be positive; the intercept absorbs the target means and is unpenalized.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("X and Y must be 2-d arrays")
    n, d = X.shape
    if n < 1 or d < 1 or Y.shape[1] < 1:
        raise ValueError("empty design or target matrix")
    if Y.shape[0] != n:
        raise ValueError("X and Y row counts differ")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("non-finite training values")

    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    system = Xc.T @ Xc + lam * np.eye(d)
    weights = np.linalg.solve(system, Xc.T @ Yc)
    intercept = y_mean - x_mean @ weights

    roster = tuple(roster) if roster else tuple(f"expert{k}" for k in range(Y.shape[1]))
    if len(roster) != Y.shape[1]:
        raise ValueError("roster size does not match target width")
    return RidgeRegressor(
        roster=roster,
        input_dim=d,
        weights=weights,
        intercept=intercept,
        config=RidgeConfig(lam=lam).snapshot(),
    )
