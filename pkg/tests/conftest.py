import sys

import numpy as np
import pandas as pd
import pytest
from loguru import logger as log

from survbench.classic import SurvivalCurve, TimeGrid
from survbench.data import N_CHANNELS, TARGET_LENGTH, Cohort
from survbench.synthetic import SyntheticSpec, generate

SMALL_SPEC = {
    "n": 240,
    "beta": {"age": 0.02, "sex": 0.3},
    "gamma": 1.5,
    "weibull_scale": 1500.0,
    "censor_max": 3650.0,
    "seed": 3,
    "ecgs_per_patient": 2,
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    log.remove()
    log.add(sys.stderr, level="INFO")


@pytest.fixture
def warnings_seen():
    """Messages logged at WARNING or above while the test runs."""
    messages = []
    handler = log.add(lambda message: messages.append(message.record["message"]), level="WARNING")
    yield messages
    log.remove(handler)


@pytest.fixture(scope="session")
def small_cohort():
    """Synthetic cohort (2 ECGs per patient) and its true log-risk."""
    return generate(SyntheticSpec(**SMALL_SPEC))


@pytest.fixture
def make_cohort():
    """Build a cohort with flat waveforms from outcome vectors."""

    def build(times, events, patient_ids=None, covariates=None, waveforms=None) -> Cohort:
        n = len(times)
        if patient_ids is None:
            patient_ids = [f"P{i:04d}" for i in range(n)]
        if covariates is None:
            covariates = pd.DataFrame({"age": np.full(n, 50.0), "sex": np.zeros(n)})
        if waveforms is None:
            waveforms = np.zeros((n, TARGET_LENGTH, N_CHANNELS), dtype=np.float32)
        return Cohort(
            patient_ids=np.asarray(patient_ids, dtype=object),
            ecg_ids=np.array([f"E{i:05d}" for i in range(n)], dtype=object),
            waveforms=waveforms,
            covariates=covariates,
            times=times,
            events=events,
        )

    return build


@pytest.fixture
def random_curves():
    """Random valid survival curves on a grid spanning ``t_max`` days."""

    def build(rng: np.random.Generator, n: int, t_max: float = 1000.0) -> SurvivalCurve:
        steps = rng.random((n, 100))
        values = 1.0 - np.cumsum(steps, axis=1) / (steps.sum(axis=1, keepdims=True) * rng.uniform(1.0, 3.0, (n, 1)))
        return SurvivalCurve(grid=TimeGrid(t_max), values=np.clip(values, 0.0, 1.0))

    return build
