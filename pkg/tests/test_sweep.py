import numpy as np
import pytest

from survbench import sweep
from survbench.ledger import RunLedger, RunState, canonical_results
from survbench.lib import ConfigError, Undefined, from_jsonable, to_jsonable
from survbench.sweep import (
    SweepConfig,
    cross_evaluate,
    execute,
    expand_sweep,
    recompute_metrics,
    select_runs,
)

SYNTHETIC = {"n": 240, "beta": {"age": 0.02, "sex": 0.3}, "gamma": 1.5, "weibull_scale": 1500.0, "seed": 3, "ecgs_per_patient": 2}
TRAIN = {"max_epochs": 2, "plateau_patience": 1, "early_stop_patience": 2, "batch_size": 32}
EVALUATION = {"horizons_years": [1, 2], "bootstrap_reps": 3, "population_reps": 5}


def _config(output_dir, **fields) -> dict:
    return {
        "schema": 1,
        "datasets": [{"name": "A", "synthetic": SYNTHETIC}],
        "encoders": ["TabularZero", "WaveStats"],
        "methods": ["DeepSurv", "LogisticHazard", "Cla-1"],
        "covariate_sets": ["age+sex"],
        "seeds": [0, 1],
        "train": TRAIN,
        "evaluation": EVALUATION,
        "output_dir": str(output_dir),
        **fields,
    }


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    config = SweepConfig(_config(tmp_path_factory.mktemp("sweep")))
    counts = execute(expand_sweep(config), config)
    return config, counts


def test_default_expansion(tmp_path):
    config = SweepConfig({"schema": 1, "datasets": [{"name": "A", "synthetic": {"n": 10}}], "output_dir": str(tmp_path)})

    specs = expand_sweep(config)

    assert len(specs) == 96
    assert len({s.key for s in specs}) == 96
    assert specs[0].axes == ("A", "TabularZero", "DeepSurv", "none", "0")
    return


def test_key_ignores_output_and_other_axes(tmp_path):
    first = expand_sweep(SweepConfig(_config(tmp_path / "a")))
    second = expand_sweep(SweepConfig(_config(tmp_path / "b", seeds=[0])))
    changed = expand_sweep(SweepConfig(_config(tmp_path / "a", train={**TRAIN, "lr": 0.01})))

    assert {s.key for s in second} <= {s.key for s in first}
    assert not {s.key for s in changed} & {s.key for s in first}
    return


def test_machine_sets_dropped(tmp_path, warnings_seen):
    config = SweepConfig(_config(tmp_path, covariate_sets=["none", "age+sex+machine"]))

    specs = expand_sweep(config)

    assert len(specs) == 12
    assert all(s.covariates == "none" for s in specs)
    assert any("no machine measures" in message for message in warnings_seen)
    with pytest.raises(ConfigError):
        expand_sweep(SweepConfig(_config(tmp_path, covariate_sets=["age+sex+machine"])))
    return


@pytest.mark.parametrize(
    "fields",
    [
        {"schema": 2},
        {"datasets": []},
        {"encoders": ["ResNet"]},
        {"methods": []},
        {"seeds": [-1]},
        {"train": {"learning_rate": 0.1}},
        {"evaluation": {"weighting": "ipcw"}},
        {"datasets": [{"name": "A"}]},
        {"datasets": [{"name": "A", "synthetic": {"n": 10}}, {"name": "A", "synthetic": {"n": 20}}]},
        {"comparisons": [{"a": "x"}]},
        {"plots": True},
    ],
)
def test_invalid_configs(tmp_path, fields):
    with pytest.raises(ConfigError):
        SweepConfig(_config(tmp_path, **fields))
    return


def test_config_file(tmp_path):
    path = tmp_path / "sweep.json"
    path.write_text("{schema: 1")

    with pytest.raises(ConfigError):
        SweepConfig.from_file(path)
    return


def test_select_runs(tmp_path):
    specs = expand_sweep(SweepConfig(_config(tmp_path)))

    assert len(select_runs(specs, ["WaveStats"])) == 6
    assert len(select_runs(specs, None, ["Cla-*"])) == 8
    assert len(select_runs(specs, ["WaveStats"], ["Cla-*", "1"])) == 2
    assert len(select_runs(specs, ["Deep*"])) == 4
    return


def test_sweep_runs_every_spec(finished):
    config, counts = finished

    assert counts == {"done": 12, "failed": 0, "skipped": 0}
    ledger = RunLedger(config.results_path)
    assert len(ledger.done) == 12
    for record in ledger.done:
        for artifact in record["artifacts"].values():
            assert (config.output_dir / artifact).is_file()
        assert record["epochs"] <= TRAIN["max_epochs"]
        assert 0.0 <= record["metrics"]["bootstrap_concordance"]["median"] <= 1.0
    return


def test_resume_skips_done_runs(finished):
    config, _ = finished
    before = config.results_path.read_text()

    counts = execute(expand_sweep(config), config)

    assert counts == {"done": 0, "failed": 0, "skipped": 12}
    assert config.results_path.read_text() == before
    return


def test_metrics_recompute_from_curves(finished):
    config, _ = finished

    for record in RunLedger(config.results_path).done:
        assert to_jsonable(recompute_metrics(record, config)) == record["metrics"]
    return


def test_parallel_matches_sequential(finished, tmp_path):
    config, _ = finished
    parallel = SweepConfig({**config.config, "output_dir": str(tmp_path)})

    counts = execute(expand_sweep(parallel), parallel, parallel=2)

    assert counts["done"] == 12
    assert canonical_results(parallel.results_path) == canonical_results(config.results_path)
    return


def test_cohorts_released_after_execute(finished):
    config, _ = finished
    sweep.clear_cohorts()
    config.datasets[0].raw_cohort()
    assert len(sweep._COHORTS) == 1

    execute(expand_sweep(config), config)

    assert not sweep._COHORTS
    return



def test_failed_run_is_retried(tmp_path, monkeypatch):
    config = SweepConfig(_config(tmp_path))
    specs = select_runs(expand_sweep(config), ["TabularZero"], ["Cla-*", "LogisticHazard", "1"])

    def broken(spec, config):
        raise RuntimeError("disk full")

    monkeypatch.setattr(sweep, "run_one", broken)
    assert execute(specs, config) == {"done": 0, "failed": 1, "skipped": 0}
    record = RunLedger(config.results_path).get(specs[0].key)
    assert record["status"] == "failed"
    assert record["error"] == "RuntimeError: disk full"

    monkeypatch.undo()
    assert execute(specs, config) == {"done": 1, "failed": 0, "skipped": 0}
    assert RunLedger(config.results_path).state(specs[0].key) is RunState.DONE
    return


def test_invalid_parallelism(finished):
    config, _ = finished

    with pytest.raises(ConfigError):
        execute([], config, parallel=0)
    return


def test_cross_evaluation(tmp_path):
    datasets = [
        {"name": "A", "synthetic": SYNTHETIC},
        {"name": "B", "synthetic": {**SYNTHETIC, "seed": 4, "amplitude_shift": 0.3}},
        {"name": "C", "synthetic": {**SYNTHETIC, "seed": 5, "machine_measures": True}},
    ]
    config = SweepConfig(
        _config(
            tmp_path,
            datasets=datasets,
            encoders=["TabularZero"],
            methods=["DeepSurv"],
            covariate_sets=["age+sex", "age+sex+machine"],
            seeds=[0],
        )
    )
    assert execute(expand_sweep(config), config)["done"] == 4

    table = cross_evaluate(config)

    assert len(table) == 12
    assert (tmp_path / "cross_eval.csv").is_file()
    cells = RunLedger(tmp_path / "cross_eval.jsonl")
    assert len(cells) == 12
    for record in RunLedger(config.results_path).done:
        own = cells.get(f"{record['key']}:{record['dataset']}")
        assert own["metrics"]["concordance"] == pytest.approx(record["metrics"]["concordance"], abs=1e-12)
        if record["covariates"] == "age+sex+machine":
            for target in ("A", "B"):
                value = from_jsonable(cells.get(f"{record['key']}:{target}")["metrics"]["concordance"])
                assert isinstance(value, Undefined)
    machine = table[table["covariates"] == "age+sex+machine"]
    assert (machine[machine["test_dataset"] != "C"]["n_undefined"] == 1).all()
    assert np.isfinite(table[table["covariates"] == "age+sex"]["median"].astype(float)).all()
    assert not sweep._COHORTS
    return
