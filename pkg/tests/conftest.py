from __future__ import annotations

import time

import pytest

from mixedquery.toymodel.synthetic import instance_heavy_dataset, overfit_dataset
from mixedquery.toymodel.train import TrainConfig, train

# overfit runs share one optimizer setting; see the toy-model tests for why
OVERFIT_TRAIN = TrainConfig(learning_rate=1e-2, batch_size=4, max_steps=2000, seed=0)

_runs: dict = {}
_seconds: dict = {}


def overfit_run(strategy: str, data: str = "panoptic"):
    """Train once per (strategy, data) per session."""
    key = (strategy, data)
    if key not in _runs:
        ds = overfit_dataset() if data == "panoptic" else instance_heavy_dataset()
        start = time.perf_counter()
        _runs[key] = (ds, train([ds], OVERFIT_TRAIN, strategy))
        _seconds[key] = time.perf_counter() - start
    return _runs[key]


def overfit_seconds(strategy: str, data: str = "panoptic") -> float:
    """Wall time of the cached training run."""
    overfit_run(strategy, data)
    return _seconds[(strategy, data)]


@pytest.fixture(scope="session")
def mixed_overfit():
    return overfit_run("mixed")
