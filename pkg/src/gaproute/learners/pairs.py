"""Pairwise tie-breaker classifier: dataset construction and inference.

Feature layout is embedding ⊕ one-hot(model_a) ⊕ one-hot(model_b). Training
rows come mirrored (both orientations, flipped labels), so the dataset is
exactly label-balanced; inference averages both orientations before
thresholding so the decision cannot depend on argument order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..jury import LabeledExample


def one_hot(roster: Sequence[str], model_id: str) -> np.ndarray:
    vec = np.zeros(len(roster))
    vec[list(roster).index(model_id)] = 1.0
    return vec


def pair_features(
    embedding: np.ndarray, model_a: str, model_b: str, roster: Sequence[str]
) -> np.ndarray:
    return np.concatenate(
        [np.asarray(embedding, dtype=np.float64), one_hot(roster, model_a), one_hot(roster, model_b)]
    )


def build_pair_dataset(
    examples: Sequence[LabeledExample], roster: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Mirrored training rows for every strictly-ordered expert pair.

    Pairs whose target scores are equal carry no preference and are skipped.
    Returns (features, labels) with labels in {0.0, 1.0}.
    """
    if len(roster) < 2:
        raise ValueError("need at least two experts")
    rows: list[np.ndarray] = []
    labels: list[float] = []
    roster = tuple(roster)
    for example in examples:
        embedding = np.asarray(example.embedding, dtype=np.float64)
        scores = example.target.scores
        for i in range(len(roster)):
            for j in range(i + 1, len(roster)):
                a_id, b_id = roster[i], roster[j]
                score_a, score_b = scores[a_id], scores[b_id]
                if score_a == score_b:
                    continue
                label = 1.0 if score_a > score_b else 0.0
                rows.append(pair_features(embedding, a_id, b_id, roster))
                labels.append(label)
                rows.append(pair_features(embedding, b_id, a_id, roster))
                labels.append(1.0 - label)
    if not rows:
        dim = (len(examples[0].embedding) if examples else 0) + 2 * len(roster)
        return np.zeros((0, dim)), np.zeros(0)
    return np.stack(rows), np.asarray(labels)


@dataclass(eq=False)
class PairClassifier:
    """Binary model over pair features plus the roster that fixes encoding."""

    base: Any
    roster: tuple[str, ...]
    embedding_dim: int
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.base.kind

    def probability(self, embedding: np.ndarray, model_a: str, model_b: str) -> float:
        """Un-symmetrized p(model_a beats model_b) for one orientation."""
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape[0] != self.embedding_dim:
            raise ValueError(
                f"embedding dim {embedding.shape[0]} does not match model dim {self.embedding_dim}"
            )
        features = pair_features(embedding, model_a, model_b, self.roster)
        proba = self.base.predict_proba(features)
        return float(proba[-1])


def predict_better(
    clf: PairClassifier, embedding: np.ndarray, model_a: str, model_b: str
) -> tuple[str, float]:
    """Winner of the pair and the symmetrized probability that a beats b.

    p = (p(a,b) + 1 - p(b,a)) / 2; a wins above 0.5, b below, and exactly
    0.5 goes to whichever model appears earlier in the roster.
    """
    if model_a == model_b:
        raise ValueError("pair needs two distinct models")
    for model in (model_a, model_b):
        if model not in clf.roster:
            raise ValueError(f"model {model!r} not in roster")
    forward = clf.probability(embedding, model_a, model_b)
    backward = clf.probability(embedding, model_b, model_a)
    p = (forward + (1.0 - backward)) / 2.0
    if p > 0.5:
        return model_a, p
    if p < 0.5:
        return model_b, p
    earlier = min(model_a, model_b, key=list(clf.roster).index)
    return earlier, p


def train_pair_classifier(
    examples: Sequence[LabeledExample],
    roster: Sequence[str],
    trainer: Any,
    **trainer_kwargs: Any,
) -> PairClassifier:
    """Build the mirrored dataset and fit `trainer` (a train_* function) on it."""
    X, y = build_pair_dataset(examples, roster)
    if X.shape[0] == 0:
        raise ValueError("pair dataset is empty; all target scores tie")
    base = trainer(X, y, task="classify", classes=(0.0, 1.0), **trainer_kwargs)
    embedding_dim = X.shape[1] - 2 * len(roster)
    return PairClassifier(
        base=base,
        roster=tuple(roster),
        embedding_dim=embedding_dim,
        config=dict(base.config),
    )
