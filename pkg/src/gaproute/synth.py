"""Synthetic labeled corpus with fully known routing geometry.

Categories are three well-separated Gaussian clusters living in embedding
coordinates 2-4. Expert quality depends only on coordinates 0-1: each
expert's raw fitness is a linear functional of that plane (three directions
120 degrees apart), mapped through a softmax, so the best expert is exact
ground truth and prompts near a wedge boundary form a narrow-gap pocket
where the top two experts are nearly tied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .corpus import stratified_split
from .evaluation import actual_best, sweep
from .jury import LabeledExample, NormalizedScores
from .learners import (
    ForestConfig,
    MLPConfig,
    evaluate_regressor,
    examples_to_arrays,
    train_mlp,
    train_pair_classifier,
    train_random_forest,
)

DEFAULT_ROSTER = ("expert-a", "expert-b", "expert-c")
DEFAULT_CATEGORIES = ("coding", "mathematics", "writing")

# Unit directions 120 degrees apart: argmax over them cuts the score plane
# into three wedges whose borders carry near-tied top-2 scores.
_ANGLES = (0.5 * math.pi, 0.5 * math.pi + 2 * math.pi / 3, 0.5 * math.pi + 4 * math.pi / 3)


@dataclass(frozen=True)
class SynthConfig:
    n_examples: int = 2000
    dim: int = 8
    seed: int = 0
    roster: tuple[str, ...] = DEFAULT_ROSTER
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    cluster_separation: float = 3.0
    cluster_std: float = 0.5
    noise_std: float = 0.5
    # Flat enough that roughly 7% of prompts land in the sub-tau pocket.
    temperature: float = 0.5

    def __post_init__(self) -> None:
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")
        if len(self.roster) != 3 or len(self.categories) != 3:
            raise ValueError("the generator is built around 3 experts and 3 categories")
        if self.dim < 5:
            raise ValueError("dim must be at least 5 (2 score + 3 cluster coordinates)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def expert_directions() -> np.ndarray:
    return np.array([[math.cos(a), math.sin(a)] for a in _ANGLES])


def true_scores(plane_point: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax over the three linear fitness functionals at one (u, v) point."""
    raw = expert_directions() @ np.asarray(plane_point, dtype=np.float64)
    shifted = raw / temperature
    shifted -= shifted.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def generate(config: SynthConfig | None = None) -> list[LabeledExample]:
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    examples: list[LabeledExample] = []
    for k in range(cfg.n_examples):
        cat_idx = int(rng.integers(0, 3))
        plane = rng.uniform(-1.0, 1.0, size=2)
        cluster = rng.normal(0.0, cfg.cluster_std, size=3)
        cluster[cat_idx] += cfg.cluster_separation
        noise = rng.normal(0.0, cfg.noise_std, size=cfg.dim - 5)
        embedding = np.concatenate([plane, cluster, noise])

        scores = true_scores(plane, cfg.temperature)
        prompt_id = f"synth-{k:05d}"
        examples.append(
            LabeledExample(
                prompt_id=prompt_id,
                embedding=tuple(float(v) for v in embedding),
                target=NormalizedScores(
                    prompt_id=prompt_id,
                    scores={m: float(s) for m, s in zip(cfg.roster, scores)},
                ),
                category=cfg.categories[cat_idx],
            )
        )
    return examples


def split_examples(
    examples: Sequence[LabeledExample],
    roster: Sequence[str],
    train_fraction: float = 0.8,
    seed: int = 0,
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Stratify by category and true best expert so both sides see every
    wedge of every cluster."""
    return stratified_split(
        examples,
        lambda e: (e.category, actual_best(tuple(roster), e.target.scores)),
        train_fraction,
        seed,
    )


@dataclass(frozen=True)
class ExperimentResult:
    n_train: int
    n_validation: int
    category_accuracy: float
    regressor_metrics: dict[str, float]
    fallback_fraction: float
    selection_at_zero: float
    selection_at_tau: float
    tau: float

    def to_json(self) -> dict[str, Any]:
        return {
            "n_train": self.n_train,
            "n_validation": self.n_validation,
            "category_accuracy": self.category_accuracy,
            "regressor_metrics": dict(self.regressor_metrics),
            "fallback_fraction": self.fallback_fraction,
            "selection_at_zero": self.selection_at_zero,
            "selection_at_tau": self.selection_at_tau,
            "tau": self.tau,
        }


def run_experiment(
    config: SynthConfig | None = None,
    tau: float = 0.10,
    train_fraction: float = 0.8,
    forest: ForestConfig | None = None,
    pair_mlp: MLPConfig | None = None,
    category_forest: ForestConfig | None = None,
) -> ExperimentResult:
    """Generate, train the global regressor + pairwise tie-breaker + category
    classifier, and measure everything on the held-out split."""
    cfg = config or SynthConfig()
    examples = generate(cfg)
    train, validation = split_examples(examples, cfg.roster, train_fraction, cfg.seed)

    X_train, Y_train = examples_to_arrays(train, cfg.roster)
    # A moderately deep forest leaves boundary mistakes for the pairwise
    # tie-breaker to repair; deeper settings mask the classifier's lift.
    regressor = train_random_forest(
        X_train,
        Y_train,
        forest or ForestConfig(n_trees=40, max_depth=6, seed=cfg.seed + 1),
        roster=cfg.roster,
    )
    pair_clf = train_pair_classifier(
        train,
        cfg.roster,
        train_mlp,
        config=pair_mlp
        or MLPConfig(hidden_sizes=(24,), epochs=300, learning_rate=0.05, seed=cfg.seed + 2),
    )
    category_clf = train_random_forest(
        X_train,
        [e.category for e in train],
        category_forest or ForestConfig(n_trees=30, max_depth=6, seed=cfg.seed + 3),
        task="classify",
        classes=cfg.categories,
    )

    X_val, _ = examples_to_arrays(validation, cfg.roster)
    predicted = category_clf.predict(X_val)
    category_accuracy = float(
        np.mean([p == e.category for p, e in zip(predicted, validation)])
    )

    rows = sweep(validation, regressor, pair_clf, taus=(0.0, tau))
    at_zero, at_tau = rows[0], rows[1]
    return ExperimentResult(
        n_train=len(train),
        n_validation=len(validation),
        category_accuracy=category_accuracy,
        regressor_metrics=evaluate_regressor(regressor, validation),
        fallback_fraction=at_tau["fallback_fraction"],
        selection_at_zero=at_zero["selection_acc"],
        selection_at_tau=at_tau["selection_acc"],
        tau=tau,
    )
