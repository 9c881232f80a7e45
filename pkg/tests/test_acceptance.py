"""Long end-to-end checks; run with ``pytest --runslow``."""

import pytest

from survbench.classic import TimeGrid
from survbench.data import Split, SplitSpec, fit_apply_normalizer, split_by_patient
from survbench.ledger import RunLedger, canonical_results
from survbench.metrics import concordance_td
from survbench.network import FusionNet
from survbench.report import build_report
from survbench.sweep import SweepConfig, TrainedModel, cross_evaluate, execute, expand_sweep
from survbench.synthetic import SyntheticSpec, generate
from survbench.training import TrainConfig, head_dim, train

LEARNING_SPEC = {"n": 7750, "beta": {"age": 0.03, "sex": 0.3}, "gamma": 2.0, "weibull_scale": 2000.0, "seed": 11}
TOLERANCE = {
    "DeepSurv": 0.05,
    "LogisticHazard": 0.05,
    "MTLR": 0.05,
    "DeepHit": 0.05,
    "Cla-1": 0.08,
    "Cla-2": 0.08,
    "Cla-5": 0.08,
    "Cla-10": 0.08,
}
SWEEP_SPEC = {**LEARNING_SPEC, "n": 400, "ecgs_per_patient": 2}
SHIFTED = [
    {"name": "B", "synthetic": {**SWEEP_SPEC, "seed": 12, "amplitude_shift": 0.3}},
    {"name": "C", "synthetic": {**SWEEP_SPEC, "seed": 13}},
]
CROSS_AXES = ("WaveStats", "DeepSurv", "age+sex", "0")


@pytest.fixture(scope="module")
def learning_cohort():
    cohort, log_risk = generate(SyntheticSpec(**LEARNING_SPEC))
    split = split_by_patient(cohort, SplitSpec(seed=0))
    test = [split[e] is Split.TEST for e in cohort.ecg_ids]
    return fit_apply_normalizer(cohort.with_split(split)), log_risk[test]


@pytest.mark.slow
@pytest.mark.parametrize("method", TOLERANCE)
def test_learning_approaches_oracle(learning_cohort, method):
    cohort, test_log_risk = learning_cohort
    val, test = cohort.select(Split.VAL), cohort.select(Split.TEST)
    grid = TimeGrid.from_times(val.times)
    net = FusionNet("WaveStats", 2, head_dim(method), seed=0)

    train(net, cohort, grid, TrainConfig(method=method, max_epochs=100))
    model = TrainedModel(net, method, grid, cohort.normalizer, ["age", "sex"]).fit_second_stage(cohort)
    achieved = concordance_td(model.curves(test), test.times, test.events, weighting="km")
    oracle = concordance_td(test_log_risk, test.times, test.events, weighting="km")

    assert achieved >= oracle - TOLERANCE[method]
    return


@pytest.mark.slow
def test_full_sweep(tmp_path):
    config = SweepConfig(
        {
            "schema": 1,
            "datasets": [{"name": "A", "synthetic": SWEEP_SPEC}],
            "train": {"max_epochs": 5, "plateau_patience": 2, "early_stop_patience": 3, "batch_size": 64},
            "evaluation": {"bootstrap_reps": 5, "population_reps": 20},
            "output_dir": str(tmp_path / "first"),
        }
    )
    specs = expand_sweep(config)
    assert len(specs) == 96

    assert execute(specs, config, parallel=4) == {"done": 96, "failed": 0, "skipped": 0}
    canon = canonical_results(config.results_path)
    assert execute(specs, config) == {"done": 0, "failed": 0, "skipped": 96}
    assert canonical_results(config.results_path) == canon
    assert len(RunLedger(config.results_path).done) == 96

    again = SweepConfig({**config.config, "output_dir": str(tmp_path / "again")})
    assert execute(expand_sweep(again), again)["done"] == 96
    assert canonical_results(again.results_path) == canon

    written = build_report(config)
    assert (tmp_path / "first" / "report" / "summary.csv").is_file()
    assert len([name for name in written if name.startswith("km_")]) == 32

    shifted = SweepConfig({**config.config, "datasets": config.config["datasets"] + SHIFTED})
    extra = [s for s in expand_sweep(shifted) if s.dataset != "A" and s.axes[1:] == CROSS_AXES]
    assert execute(extra, shifted) == {"done": 2, "failed": 0, "skipped": 0}

    table = cross_evaluate(shifted, select=["DeepSurv"])

    cells = table[(table["encoder"] == "WaveStats") & (table["method"] == "DeepSurv") & (table["covariates"] == "age+sex")]
    assert set(zip(cells["train_dataset"], cells["test_dataset"])) == {(a, b) for a in "ABC" for b in "ABC"}
    assert len(cells) == 9
    assert (cells["n_undefined"] == 0).all()
    assert (tmp_path / "first" / "cross_eval.csv").is_file()
    return
