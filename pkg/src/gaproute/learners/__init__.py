"""From-scratch learners: ridge, random forest, MLP, the pair classifier,
regressor metrics, and bundle serialization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .bundle import (
    FORMAT_VERSION,
    MODE_GLOBAL,
    MODE_PER_CATEGORY,
    BundleError,
    ModelBundle,
    load_bundle,
    roster_hash,
    save_bundle,
)
from .forest import (
    TASK_CLASSIFY,
    TASK_REGRESS,
    ForestConfig,
    RandomForestModel,
    train_random_forest,
)
from .metrics import evaluate_regressor, examples_to_arrays, top_two
from .mlp import MLPConfig, MLPModel, TrainingDiverged, train_mlp
from .pairs import (
    PairClassifier,
    build_pair_dataset,
    one_hot,
    pair_features,
    predict_better,
    train_pair_classifier,
)
from .ridge import RidgeConfig, RidgeRegressor, train_ridge


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for every learner plus the model-kind selections."""

    ridge: RidgeConfig = RidgeConfig()
    rf: ForestConfig = ForestConfig()
    mlp: MLPConfig = MLPConfig()
    regressor: str = "random_forest"
    pair_classifier: str = "mlp"
    category_classifier: str = "random_forest"

    def snapshot(self) -> dict[str, Any]:
        return {
            "ridge": self.ridge.snapshot(),
            "rf": self.rf.snapshot(),
            "mlp": self.mlp.snapshot(),
            "regressor": self.regressor,
            "pair_classifier": self.pair_classifier,
            "category_classifier": self.category_classifier,
        }


__all__ = [
    "FORMAT_VERSION",
    "MODE_GLOBAL",
    "MODE_PER_CATEGORY",
    "TASK_CLASSIFY",
    "TASK_REGRESS",
    "BundleError",
    "ForestConfig",
    "MLPConfig",
    "MLPModel",
    "ModelBundle",
    "PairClassifier",
    "RandomForestModel",
    "RidgeConfig",
    "RidgeRegressor",
    "TrainingConfig",
    "TrainingDiverged",
    "build_pair_dataset",
    "evaluate_regressor",
    "examples_to_arrays",
    "load_bundle",
    "one_hot",
    "pair_features",
    "predict_better",
    "roster_hash",
    "save_bundle",
    "top_two",
    "train_mlp",
    "train_pair_classifier",
    "train_random_forest",
    "train_ridge",
]
