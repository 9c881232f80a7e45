import numpy as np
import pandas as pd
import pytest

from survbench.classic import SurvivalCurve, TimeGrid
from survbench.lib import BootstrapError, ShapeError, Undefined, UndefinedMetricError, YEAR_DAYS
from survbench.metrics import (
    bootstrap_per_patient,
    concordance_censored_at,
    concordance_td,
    horizon_roc_prc,
    population_survival,
    subgroup_concordance,
    summarize,
)


def _censoring_left_limit(times: np.ndarray, events: np.ndarray) -> np.ndarray:
    factors = {
        s: 1.0 - np.count_nonzero((times == s) & ~events) / np.count_nonzero(times >= s)
        for s in np.unique(times[~events])
    }
    out = np.ones(len(times))
    for i, t in enumerate(times):
        for s, factor in factors.items():
            if s < t:
                out[i] *= factor
    return out


def _brute_concordance(curves: SurvivalCurve, times, events, weighting: str) -> float:
    points = curves.grid.points
    weights = np.ones(len(times))
    if weighting == "km":
        weights = np.maximum(_censoring_left_limit(times, events), 0.05) ** -2.0
    score = total = 0.0
    for i in range(len(times)):
        if not events[i]:
            continue
        column = int(np.argmin(np.abs(points - times[i])))
        for j in range(len(times)):
            if not (times[i] < times[j] or (times[i] == times[j] and not events[j])):
                continue
            own, other = curves.values[i, column], curves.values[j, column]
            score += weights[i] * (1.0 if own < other else 0.5 if own == other else 0.0)
            total += weights[i]
    return score / total


@pytest.mark.parametrize("weighting", ["none", "km"])
@pytest.mark.parametrize("seed", range(50))
def test_concordance_matches_brute_force(random_curves, weighting, seed):
    rng = np.random.default_rng(seed)
    n = 300 if seed == 0 else int(rng.integers(5, 301))
    times = np.round(rng.uniform(1.0, 1000.0, n), 0)
    events = rng.random(n) < 0.6
    events[0] = True
    times[0] = times.min() - 0.5 if times.min() > 1.0 else 0.5
    curves = random_curves(rng, n, t_max=1000.0)

    expected = _brute_concordance(curves, times, events, weighting)

    assert concordance_td(curves, times, events, weighting=weighting) == pytest.approx(expected, abs=1e-12)
    return


def test_concordance_perfect_and_tied():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.array([True, True, True, False])

    assert concordance_td(np.array([4.0, 3.0, 2.0, 1.0]), times, events) == 1.0
    assert concordance_td(np.array([1.0, 2.0, 3.0, 4.0]), times, events) == 0.0
    assert concordance_td(np.zeros(4), times, events) == 0.5
    return


def test_concordance_swapping_flips_two_records():
    grid = TimeGrid(10.0)
    low, high = np.full(100, 0.2), np.full(100, 0.8)
    times, events = [1.0, 2.0], [True, True]

    assert concordance_td(SurvivalCurve(grid, np.vstack([low, high])), times, events) == 1.0
    assert concordance_td(SurvivalCurve(grid, np.vstack([high, low])), times, events) == 0.0
    return


def test_concordance_without_pairs():
    with pytest.raises(UndefinedMetricError):
        concordance_td(np.zeros(3), [1.0, 2.0, 3.0], [False, False, False])
    with pytest.raises(ShapeError):
        concordance_td(np.zeros(3), [1.0, 2.0], [True, False])
    return


def test_concordance_invariant_to_increasing_transform(random_curves):
    rng = np.random.default_rng(7)
    curves = random_curves(rng, 40)
    times, events = rng.uniform(1.0, 1000.0, 40), rng.random(40) < 0.5
    events[0] = True
    squared = SurvivalCurve(curves.grid, curves.values**2)

    assert concordance_td(curves, times, events, "km") == concordance_td(squared, times, events, "km")
    return


def test_censored_at_horizon():
    rng = np.random.default_rng(8)
    times = rng.uniform(10.0, 3 * YEAR_DAYS, 50)
    events = rng.random(50) < 0.7
    risks = rng.normal(size=50)

    beyond = concordance_censored_at(risks, times, events, 10)
    assert beyond == concordance_td(risks, times, events)
    with pytest.raises(UndefinedMetricError):
        concordance_censored_at(risks, times + YEAR_DAYS, events, 1)
    return


def test_roc_prc_perfect_and_constant():
    times = np.array([100.0, 200.0, 500.0, 800.0, 900.0])
    events = np.array([True, True, False, True, False])

    auroc, auprc = horizon_roc_prc(np.array([5.0, 4.0, 1.0, 2.0, 3.0]), times, events, 1)
    assert (auroc, auprc) == (1.0, 1.0)

    auroc, auprc = horizon_roc_prc(np.zeros(5), times, events, 1)
    assert auroc == 0.5
    assert auprc == pytest.approx(0.4, abs=1e-15)
    return


def test_roc_prc_against_exhaustive_thresholds():
    rng = np.random.default_rng(9)
    scores = np.round(rng.random(20), 1)
    labels = np.zeros(20, dtype=bool)
    labels[rng.choice(20, 7, replace=False)] = True
    times = np.where(labels, 100.0, 2000.0)

    auroc, auprc = horizon_roc_prc(scores, times, labels, 1)

    pos, neg = scores[labels], scores[~labels]
    pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert auroc == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)

    ap, last_recall = 0.0, 0.0
    for threshold in np.unique(scores)[::-1]:
        chosen = scores >= threshold
        recall = (chosen & labels).sum() / labels.sum()
        precision = (chosen & labels).sum() / chosen.sum()
        ap += (recall - last_recall) * precision
        last_recall = recall
    assert auprc == pytest.approx(ap, abs=1e-12)
    return


def test_roc_prc_undefined(random_curves):
    times = np.array([100.0, 200.0, 300.0])
    with pytest.raises(UndefinedMetricError):
        horizon_roc_prc(np.zeros(3), times, [False, False, False], 1)

    curves = random_curves(np.random.default_rng(0), 3, t_max=300.0)
    with pytest.raises(UndefinedMetricError):
        horizon_roc_prc(curves, times, [True, False, False], 1)
    return


def test_summarize():
    assert summarize([1.0, 2.0, 3.0, 4.0, 5.0]) == {"median": 3.0, "q25": 2.0, "q75": 4.0, "n": 5, "n_undefined": 0}

    summary = summarize([0.7, Undefined("no pairs")])
    assert summary["median"] == 0.7
    assert summary["n_undefined"] == 1
    assert isinstance(summarize([Undefined("x")])["median"], Undefined)
    return


def test_bootstrap_single_ecg_patients():
    times = np.arange(1.0, 11.0)
    events = np.ones(10, dtype=bool)
    risks = np.random.default_rng(0).normal(size=10)
    patients = [f"P{i}" for i in range(10)]

    result = bootstrap_per_patient(lambda index: concordance_td(risks[index], times[index], events[index]), patients)

    assert len(result["values"]) == 20
    assert set(result["values"]) == {concordance_td(risks, times, events)}
    return


def test_bootstrap_draws_one_record_per_patient():
    patients = np.array(["A", "A", "B", "B", "B", "C"])
    seen = []

    first = bootstrap_per_patient(lambda index: seen.append(list(patients[index])) or len(index), patients, reps=5, seed=3)
    second = bootstrap_per_patient(lambda index: len(index), patients, reps=5, seed=3)

    assert first["values"] == [3] * 5
    assert all(drawn == ["A", "B", "C"] for drawn in seen)
    assert second["median"] == first["median"]
    return


def test_bootstrap_failure_names_replicate():
    def metric(index):
        raise UndefinedMetricError("no comparable pairs")

    with pytest.raises(BootstrapError) as err:
        bootstrap_per_patient(metric, ["A", "B"], reps=3)
    assert err.value.rep == 0
    return


def test_population_survival_single_record(random_curves):
    curves = random_curves(np.random.default_rng(1), 1)

    table = population_survival(curves, reps=10)

    assert np.allclose(table["median"], curves.values[0])
    assert np.allclose(table["lower"], table["upper"])
    return


def test_population_survival_with_observations():
    grid = TimeGrid(99.0)
    values = np.tile(np.linspace(1.0, 0.5, 100), (4, 1))

    table = population_survival(SurvivalCurve(grid, values), reps=10, times=[10.0, 20.0, 30.0, 40.0], events=[1, 1, 0, 1])

    assert list(table.columns) == ["time", "median", "lower", "upper", "kaplan_meier", "at_risk"]
    assert np.allclose(table["lower"], table["upper"])
    assert table["at_risk"][0] == 4
    assert table["kaplan_meier"][15] == 0.75
    return


def test_subgroups():
    rng = np.random.default_rng(2)
    n = 30
    times, events = rng.uniform(1.0, 500.0, n), rng.random(n) < 0.7
    events[0] = True
    risks = rng.normal(size=n)
    covariates = pd.DataFrame({"age": np.full(n, 65.0), "sex": np.ones(n)})

    table = subgroup_concordance(risks, times, events, covariates)

    assert len(table) == 8
    assert table["n"].sum() == n
    cell = table[(table["age_bin"] == "60+") & (table["sex"] == "M")].iloc[0]
    assert cell["concordance"] == concordance_td(risks, times, events)
    others = table[table["n"] == 0]
    assert all(isinstance(v, Undefined) for v in others["concordance"])
    return
