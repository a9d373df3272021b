"""Offline evaluation: win rate, coverage and selection accuracy, threshold
sweeps, gap statistics, and deterministic report files.

Decisions pair with actual score vectors positionally. The actual-best
expert on a prompt is the argmax of the actual scores with ties going to
the earlier roster position, matching the ranking convention used when the
labels were built. Reports round-trip byte-identically for identical inputs:
canonical JSON, fixed CSV column order, no timestamps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from io import StringIO
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .jsonl import dumps_canonical
from .jury import LabeledExample
from .learners.bundle import MODE_PER_CATEGORY
from .learners.metrics import evaluate_regressor, examples_to_arrays
from .learners.pairs import PairClassifier, predict_better
from .router import (
    DEFAULT_TAU,
    CostModel,
    RouterPolicy,
    RoutingDecision,
    expected_cost,
    gap,
    route,
)

SWEEP_COLUMNS = ("tau", "coverage_acc", "selection_acc", "fallback_fraction", "expected_cost")


def default_tau_grid() -> tuple[float, ...]:
    return tuple(round(0.01 * k, 2) for k in range(1, 21))


def actual_best(roster: Sequence[str], actual: Mapping[str, float]) -> str:
    """Expert with the highest actual score; earlier roster position on ties."""
    order = list(roster)
    return max(order, key=lambda m: (actual[m], -order.index(m)))


class _CategoryDispatchRegressor:
    """Scores each embedding with the regressor for its predicted category."""

    def __init__(self, bundle: Any) -> None:
        self._bundle = bundle
        self.roster = tuple(bundle.roster)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            category = str(self._bundle.category_classifier.predict(X))
            return np.asarray(self._bundle.regressor_for(category).predict(X))
        return np.stack([self.predict(row) for row in X])


def bundle_regressor(bundle: Any) -> Any:
    """A single predict()/roster view over a bundle, whichever mode it stores."""
    if bundle.mode == MODE_PER_CATEGORY:
        return _CategoryDispatchRegressor(bundle)
    return bundle.regressor_for(None)


def _check_aligned(
    decisions: Sequence[RoutingDecision], actual_scores: Sequence[Mapping[str, float]]
) -> None:
    if not decisions:
        raise ValueError("no decisions to evaluate")
    if len(decisions) != len(actual_scores):
        raise ValueError("decisions and actual score vectors must align one-to-one")


def win_rate(
    decisions: Sequence[RoutingDecision],
    actual_scores: Sequence[Mapping[str, float]],
    reference_expert: str,
) -> float:
    """Half credit for picking the reference, full credit for picking an
    expert that actually beat it; equal-or-worse non-reference picks score 0."""
    _check_aligned(decisions, actual_scores)
    n_reference = 0
    n_better = 0
    for decision, actual in zip(decisions, actual_scores):
        if decision.chosen == reference_expert:
            n_reference += 1
        elif actual[decision.chosen] > actual[reference_expert]:
            n_better += 1
    return (0.5 * n_reference + n_better) / len(decisions)


def coverage_accuracy(
    decisions: Sequence[RoutingDecision],
    actual_scores: Sequence[Mapping[str, float]],
) -> float:
    """Fraction of prompts whose consulted candidate set ({top1}, or
    {top1, top2} on fallback) contains the actual best expert."""
    _check_aligned(decisions, actual_scores)
    hits = 0
    for decision, actual in zip(decisions, actual_scores):
        best = actual_best(tuple(decision.scores), actual)
        candidates = {decision.top1, decision.top2} if decision.fallback_used else {decision.top1}
        hits += best in candidates
    return hits / len(decisions)


def selection_accuracy(
    decisions: Sequence[RoutingDecision],
    actual_scores: Sequence[Mapping[str, float]],
) -> float:
    _check_aligned(decisions, actual_scores)
    hits = 0
    for decision, actual in zip(decisions, actual_scores):
        hits += decision.chosen == actual_best(tuple(decision.scores), actual)
    return hits / len(decisions)


def _traces(
    examples: Sequence[LabeledExample],
    regressor: Any,
    classifier: PairClassifier | None,
) -> tuple[np.ndarray, list[tuple[int, int]], list[str], list[str]]:
    """Per-example gap, top-two indices, fallback winner, and actual best.

    The fallback winner does not depend on tau, so one classifier pass here
    covers every threshold in a sweep.
    """
    roster = tuple(regressor.roster)
    X, _ = examples_to_arrays(examples, roster)
    pred = np.asarray(regressor.predict(X), dtype=np.float64)

    gaps = np.empty(len(examples))
    tops: list[tuple[int, int]] = []
    fallback_choice: list[str] = []
    best: list[str] = []
    for row, example in enumerate(examples):
        first, second, g = gap(pred[row])
        gaps[row] = g
        tops.append((first, second))
        if classifier is None:
            fallback_choice.append("")
        else:
            winner, _ = predict_better(
                classifier, np.asarray(example.embedding), roster[first], roster[second]
            )
            fallback_choice.append(winner)
        best.append(actual_best(roster, example.target.scores))
    return gaps, tops, fallback_choice, best


def sweep(
    examples: Sequence[LabeledExample],
    regressor: Any,
    classifier: PairClassifier | None,
    taus: Sequence[float],
    cost_model: CostModel | None = None,
) -> list[dict[str, float]]:
    """One row per threshold: coverage, selection, fallback fraction, cost."""
    if not examples:
        raise ValueError("no examples to evaluate")
    if not taus:
        raise ValueError("need at least one tau")
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ValueError("taus must be ascending")

    roster = tuple(regressor.roster)
    gaps, tops, fallback_choice, best = _traces(examples, regressor, classifier)
    n = len(examples)

    rows = []
    for tau in taus:
        fall = gaps < tau
        if classifier is None and fall.any():
            raise ValueError(
                "gap below tau but no tie-breaker classifier is available"
            )
        coverage_hits = 0
        selection_hits = 0
        for row in range(n):
            first, second = tops[row]
            if fall[row]:
                candidates = {roster[first], roster[second]}
                chosen = fallback_choice[row]
            else:
                candidates = {roster[first]}
                chosen = roster[first]
            coverage_hits += best[row] in candidates
            selection_hits += chosen == best[row]
        rows.append(
            {
                "tau": float(tau),
                "coverage_acc": coverage_hits / n,
                "selection_acc": selection_hits / n,
                "fallback_fraction": float(np.mean(fall)),
                "expected_cost": expected_cost(gaps, tau, cost_model),
            }
        )
    return rows


def gap_stats(
    regressor: Any,
    examples: Sequence[LabeledExample],
    bins: int = 40,
    bin_range: tuple[float, float] = (0.0, 0.4),
) -> dict[str, Any]:
    """Mean first-vs-second and first-vs-third gaps plus fixed-width
    histograms; the third-place statistics are omitted under three experts."""
    if not examples:
        raise ValueError("no examples to evaluate")
    roster = tuple(regressor.roster)
    X, _ = examples_to_arrays(examples, roster)
    pred = np.asarray(regressor.predict(X), dtype=np.float64)
    ordered = -np.sort(-pred, axis=1)

    g12 = ordered[:, 0] - ordered[:, 1]
    counts_12, edges = np.histogram(g12, bins=bins, range=bin_range)
    stats: dict[str, Any] = {
        "mean_g12": float(g12.mean()),
        "histogram": {
            "bin_edges": [float(e) for e in edges],
            "g12_counts": [int(c) for c in counts_12],
        },
    }
    if len(roster) >= 3:
        g13 = ordered[:, 0] - ordered[:, 2]
        counts_13, _ = np.histogram(g13, bins=bins, range=bin_range)
        stats["mean_g13"] = float(g13.mean())
        stats["histogram"]["g13_counts"] = [int(c) for c in counts_13]
    return stats


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[dict[str, float], ...]
    win_rates: dict[str, float]
    regressor_metrics: dict[str, float]
    gap_statistics: dict[str, Any]
    tau: float

    def to_json(self) -> dict[str, Any]:
        return {
            "rows": list(self.rows),
            "win_rates": self.win_rates,
            "regressor_metrics": self.regressor_metrics,
            "gap_statistics": self.gap_statistics,
            "tau": self.tau,
        }


def build_report(
    examples: Sequence[LabeledExample],
    regressor: Any,
    classifier: PairClassifier,
    taus: Sequence[float] | None = None,
    tau: float = DEFAULT_TAU,
    cost_model: CostModel | None = None,
    bins: int = 40,
    bin_range: tuple[float, float] = (0.0, 0.4),
) -> EvalReport:
    """Sweep rows plus win rates per reference expert at the given tau,
    regressor metrics, and gap statistics."""
    grid = tuple(taus) if taus is not None else default_tau_grid()
    rows = sweep(examples, regressor, classifier, grid, cost_model)

    policy = RouterPolicy(tau=tau)
    decisions = [
        route(np.asarray(e.embedding), regressor, classifier, policy) for e in examples
    ]
    actual = [e.target.scores for e in examples]
    roster = tuple(regressor.roster)
    rates = {model: win_rate(decisions, actual, model) for model in roster}

    return EvalReport(
        rows=tuple(rows),
        win_rates=rates,
        regressor_metrics=evaluate_regressor(regressor, examples),
        gap_statistics=gap_stats(regressor, examples, bins, bin_range),
        tau=tau,
    )


def render_report_csv(rows: Sequence[Mapping[str, float]]) -> str:
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([repr(float(row[col])) for col in SWEEP_COLUMNS])
    return buffer.getvalue()


def write_report(report: EvalReport, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(dumps_canonical(report.to_json()) + "\n", encoding="utf-8")
    if csv_path is not None:
        Path(csv_path).write_text(render_report_csv(report.rows), encoding="utf-8")
