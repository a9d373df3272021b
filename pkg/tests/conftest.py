from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow]),
)
settings.register_profile(
    "dev",
    settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]),
)
settings.register_profile(
    "default",
    settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]),
)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1337)
