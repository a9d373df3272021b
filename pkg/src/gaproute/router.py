"""Confidence-gap routing policy.

Route to the top-ranked expert outright when the predicted score gap between
first and second place is at least tau; otherwise fall back to the pairwise
tie-breaker over those two. Exactly g == tau counts as confident. Policies
and loaded models are immutable, so route() is pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .learners.pairs import PairClassifier, predict_better

MODE_GLOBAL = "global"
MODE_CATEGORY_AWARE = "category_aware"
FALLBACK_CLASSIFY_ONE = "classify_then_query_one"
FALLBACK_HEDGED_BOTH = "hedged_query_both"

DEFAULT_TAU = 0.10


@dataclass(frozen=True)
class RouterPolicy:
    """Threshold, routing mode, and fallback behavior."""

    tau: float = DEFAULT_TAU
    mode: str = MODE_GLOBAL
    fallback: str = FALLBACK_CLASSIFY_ONE

    def __post_init__(self) -> None:
        if not math.isfinite(self.tau) or self.tau < 0:
            raise ValueError("tau must be finite and >= 0")
        if self.mode not in (MODE_GLOBAL, MODE_CATEGORY_AWARE):
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if self.fallback not in (FALLBACK_CLASSIFY_ONE, FALLBACK_HEDGED_BOTH):
            raise ValueError(f"unknown fallback mode {self.fallback!r}")


@dataclass(frozen=True)
class CostModel:
    """Per-call cost units for the two lightweight models."""

    c_regressor: float = 1.0
    c_classifier: float = 1.0

    def __post_init__(self) -> None:
        if self.c_regressor < 0 or self.c_classifier < 0:
            raise ValueError("costs must be non-negative")


@dataclass(frozen=True)
class RoutingDecision:
    chosen: str
    scores: Mapping[str, float]
    top1: str
    top2: str
    gap: float
    fallback_used: bool
    upstream_calls_planned: int
    category: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "chosen": self.chosen,
            "scores": dict(self.scores),
            "top1": self.top1,
            "top2": self.top2,
            "gap": self.gap,
            "fallback_used": self.fallback_used,
            "upstream_calls_planned": self.upstream_calls_planned,
            "category": self.category,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RoutingDecision":
        return cls(
            chosen=obj["chosen"],
            scores=dict(obj["scores"]),
            top1=obj["top1"],
            top2=obj["top2"],
            gap=float(obj["gap"]),
            fallback_used=bool(obj["fallback_used"]),
            upstream_calls_planned=int(obj["upstream_calls_planned"]),
            category=obj.get("category"),
        )


def gap(scores: Sequence[float] | np.ndarray) -> tuple[int, int, float]:
    """Indices of the two largest scores (earlier index wins ties) and their
    difference."""
    values = np.asarray(scores, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] < 2:
        raise ValueError("need a flat score vector over at least two experts")
    order = np.argsort(-values, kind="stable")
    first, second = int(order[0]), int(order[1])
    return first, second, float(values[first] - values[second])


def _decide(
    embedding: np.ndarray,
    regressor: Any,
    classifier: PairClassifier | None,
    policy: RouterPolicy,
    category: str | None,
) -> RoutingDecision:
    scores = np.asarray(regressor.predict(embedding), dtype=np.float64)
    roster = tuple(regressor.roster)
    first, second, g = gap(scores)
    top1, top2 = roster[first], roster[second]

    if g >= policy.tau:
        chosen = top1
        fallback_used = False
        calls = 1
    else:
        if classifier is None:
            raise ValueError(
                "gap below tau but no tie-breaker classifier is available"
            )
        chosen, _ = predict_better(classifier, embedding, top1, top2)
        fallback_used = True
        calls = 2 if policy.fallback == FALLBACK_HEDGED_BOTH else 1

    return RoutingDecision(
        chosen=chosen,
        scores={model: float(s) for model, s in zip(roster, scores)},
        top1=top1,
        top2=top2,
        gap=g,
        fallback_used=fallback_used,
        upstream_calls_planned=calls,
        category=category,
    )


def route(
    embedding: np.ndarray | Sequence[float],
    regressor: Any,
    classifier: PairClassifier | None,
    policy: RouterPolicy,
) -> RoutingDecision:
    """Single-regressor decision rule; see the module docstring."""
    return _decide(np.asarray(embedding, dtype=np.float64), regressor, classifier, policy, None)


def route_category_aware(
    embedding: np.ndarray | Sequence[float],
    category_clf: Any,
    per_category_regressors: Mapping[str, Any],
    classifier: PairClassifier | None,
    policy: RouterPolicy,
) -> RoutingDecision:
    """Classify the category, then route with that category's regressor.

    Regressor coverage is a load-time concern (the bundle validates it); a
    label that still has no regressor here is a configuration error.
    """
    embedding = np.asarray(embedding, dtype=np.float64)
    category = str(category_clf.predict(embedding))
    if category not in per_category_regressors:
        raise ValueError(f"no regressor configured for category {category!r}")
    return _decide(embedding, per_category_regressors[category], classifier, policy, category)


def route_with_bundle(
    embedding: np.ndarray | Sequence[float],
    bundle: Any,
    policy: RouterPolicy,
) -> RoutingDecision:
    """Dispatch on the policy mode using a loaded model bundle."""
    if policy.mode == MODE_CATEGORY_AWARE:
        if bundle.category_classifier is None:
            raise ValueError("category-aware policy needs a bundle with a category classifier")
        return route_category_aware(
            embedding,
            bundle.category_classifier,
            bundle.regressors,
            bundle.pair_classifier,
            policy,
        )
    return route(embedding, bundle.regressor_for(None), bundle.pair_classifier, policy)


def expected_cost(
    gap_values: Sequence[float] | np.ndarray,
    tau: float,
    cost_model: CostModel | None = None,
) -> float:
    """Mean lightweight-model calls per prompt: one regressor call always,
    one classifier call whenever the observed gap falls below tau."""
    gaps = np.asarray(gap_values, dtype=np.float64)
    if gaps.size == 0:
        raise ValueError("need at least one gap observation")
    cm = cost_model or CostModel()
    fraction = float(np.mean(gaps < tau))
    return cm.c_regressor + fraction * cm.c_classifier


def baseline_all_pairs(
    embedding: np.ndarray | Sequence[float],
    classifier: PairClassifier,
    roster: Sequence[str] | None = None,
) -> tuple[str, int]:
    """Round-robin baseline: judge every pair once and pick the expert with
    the most wins (earlier roster position on ties). Returns (winner, calls)."""
    embedding = np.asarray(embedding, dtype=np.float64)
    models = tuple(roster) if roster is not None else tuple(classifier.roster)
    if len(models) < 2:
        raise ValueError("need at least two experts")
    wins = {model: 0 for model in models}
    calls = 0
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            winner, _ = predict_better(classifier, embedding, models[i], models[j])
            wins[winner] += 1
            calls += 1
    best = max(models, key=lambda m: (wins[m], -models.index(m)))
    return best, calls
