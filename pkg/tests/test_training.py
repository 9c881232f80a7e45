import dataclasses

import numpy as np
import pytest

from survbench import training
from survbench.classic import TimeGrid
from survbench.data import Split, SplitSpec, fit_apply_normalizer, split_by_patient
from survbench.lib import ConfigError, FormatError, PreconditionError, StateError, TrainingError
from survbench.network import FusionNet
from survbench.training import (
    AdamW,
    DeepSurvBaseline,
    ReduceLROnPlateau,
    TrainConfig,
    head_dim,
    load_checkpoint,
    predict_curves,
    save_checkpoint,
    train,
)

TINY = {"max_epochs": 3, "plateau_patience": 1, "early_stop_patience": 2, "batch_size": 64}


@pytest.fixture(scope="module")
def prepared(small_cohort):
    cohort, _ = small_cohort
    return fit_apply_normalizer(cohort.with_split(split_by_patient(cohort, SplitSpec(seed=0))))


@pytest.fixture(scope="module")
def grid(prepared):
    return TimeGrid.from_times(prepared.select(Split.VAL).times)


def _net(method: str, kind: str = "WaveStats", seed: int = 0) -> FusionNet:
    return FusionNet(kind, n_covariates=2, head_dim=head_dim(method), seed=seed)


def test_default_config():
    config = TrainConfig()

    assert (config.lr, config.plateau_factor, config.plateau_patience, config.min_lr) == (1e-3, 0.1, 10, 1e-8)
    assert (config.early_stop_patience, config.max_epochs, config.batch_size) == (20, 200, 512)
    assert config.to_json()["method"] == "DeepSurv"
    return


@pytest.mark.parametrize(
    "fields",
    [
        {"lr": 0.0},
        {"early_stop_patience": 10},
        {"plateau_factor": 1.5},
        {"method": "RandomForest"},
        {"batch_size": 0},
        {"deephit_sigma": 0.0},
    ],
)
def test_invalid_config(fields):
    with pytest.raises(ConfigError):
        TrainConfig(**fields)
    return


def test_config_from_json():
    config = TrainConfig.from_json({"lr": 0.01, "max_epochs": 5}, method="Cla-5", seed=3)

    assert (config.lr, config.max_epochs, config.method, config.seed) == (0.01, 5, "Cla-5", 3)
    assert config.horizon_years == 5
    with pytest.raises(ConfigError):
        TrainConfig.from_json({"learning_rate": 0.01})
    return


def test_adamw_first_step():
    params = np.array([1.0, -2.0])
    optimizer = AdamW(2, lr=0.1, weight_decay=0.01)

    optimizer.step(params, np.array([0.5, -0.1]))

    assert params == pytest.approx([0.999 - 0.1, -1.998 + 0.1], abs=1e-6)
    return


def test_plateau_schedule():
    optimizer = AdamW(1, lr=1e-3)
    scheduler = ReduceLROnPlateau(optimizer, factor=0.1, patience=2, min_lr=5e-4)

    assert [scheduler.step(loss) for loss in (1.0, 1.0, 1.0)] == [False, False, True]
    assert optimizer.lr == 5e-4
    assert [scheduler.step(loss) for loss in (0.5, 0.6, 0.6)] == [False, False, False]
    assert optimizer.lr == 5e-4
    return


def test_training_is_deterministic(prepared, grid):
    config = TrainConfig(method="LogisticHazard", **TINY)

    first_params, first_history = train(_net("LogisticHazard"), prepared, grid, config)
    second_params, second_history = train(_net("LogisticHazard"), prepared, grid, config)

    assert np.array_equal(first_params, second_params)
    assert first_history.equals(second_history)
    assert list(first_history.columns) == ["epoch", "train_loss", "val_loss", "lr"]
    assert first_history["epoch"][0] == 0
    assert len(first_history) <= 4
    return


def test_training_lowers_validation_loss(prepared, grid):
    config = TrainConfig(method="LogisticHazard", max_epochs=15, plateau_patience=5, early_stop_patience=10, batch_size=64)
    net = _net("LogisticHazard")

    best, history = train(net, prepared, grid, config)

    assert history["val_loss"].min() < history["val_loss"][0]
    assert np.array_equal(net.params, best)
    return


def test_early_stop_keeps_best_epoch(prepared, grid, monkeypatch):
    monkeypatch.setattr(training, "evaluate_loss", lambda *args: 1.0)
    net = _net("DeepSurv")
    initial = net.params.copy()

    best, history = train(net, prepared, grid, TrainConfig(method="DeepSurv", max_epochs=50, plateau_patience=1, early_stop_patience=2))

    assert len(history) == 3
    assert np.array_equal(best, initial)
    assert np.array_equal(net.params, initial)
    return


def test_non_finite_loss(prepared, grid, monkeypatch):
    monkeypatch.setattr(training, "batch_loss", lambda outputs, *args: (float("nan"), np.zeros_like(outputs), 0))

    with pytest.raises(TrainingError):
        train(_net("Cla-1"), prepared, grid, TrainConfig(method="Cla-1", **TINY))
    return


def test_deepsurv_needs_training_events(prepared, grid):
    no_events = dataclasses.replace(prepared, events=np.zeros(len(prepared), dtype=bool))

    with pytest.raises(PreconditionError):
        train(_net("DeepSurv"), no_events, grid, TrainConfig(**TINY))
    return


def test_head_must_fit_method(prepared, grid):
    with pytest.raises(ConfigError):
        train(_net("DeepSurv"), prepared, grid, TrainConfig(method="MTLR", **TINY))
    return


@pytest.mark.parametrize("method", ["LogisticHazard", "MTLR", "DeepHit"])
def test_discrete_curves(prepared, grid, method):
    test = prepared.select(Split.TEST)

    curves = predict_curves(_net(method), test, grid, method)

    assert curves.values.shape == (len(test), 100)
    assert curves.check()
    return


def test_deepsurv_curves(prepared, grid):
    net = _net("DeepSurv")
    test = prepared.select(Split.TEST)

    with pytest.raises(StateError):
        predict_curves(net, test, grid, "DeepSurv")
    baseline = DeepSurvBaseline.fit(net, prepared.select(Split.TRAIN))
    curves = predict_curves(net, test, grid, "DeepSurv", baseline)

    assert curves.check()
    assert (curves.values[:, 0] == 1.0).all()
    return


def test_classifier_probabilities(prepared, grid):
    probabilities = predict_curves(_net("Cla-2"), prepared.select(Split.TEST), grid, "Cla-2")

    assert probabilities.ndim == 1
    assert ((probabilities > 0) & (probabilities < 1)).all()
    return


def test_checkpoint_round_trip(tmp_path, prepared, grid):
    net = _net("MTLR", kind="TinyConv", seed=4)
    path = tmp_path / "models" / "run.ckpt"

    save_checkpoint(path, net, TrainConfig(method="MTLR"), epoch=7, val_loss=1.25, grid=grid.to_json())
    loaded, header = load_checkpoint(path)

    assert np.array_equal(loaded.params, net.params)
    assert header["epoch"] == 7
    assert header["grid"] == grid.to_json()
    assert header["config"]["method"] == "MTLR"
    assert loaded.architecture() == net.architecture()
    return


@pytest.mark.parametrize("mutate", [lambda data: b"XXXX" + data[4:], lambda data: data[:-8], lambda data: data[:6]])
def test_checkpoint_rejects_damaged_files(tmp_path, mutate):
    path = tmp_path / "run.ckpt"
    save_checkpoint(path, _net("DeepSurv", kind="TabularZero"), TrainConfig(), epoch=0, val_loss=0.0)
    path.write_bytes(mutate(path.read_bytes()))

    with pytest.raises(FormatError):
        load_checkpoint(path)
    return
