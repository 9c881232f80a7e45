import numpy as np
import pandas as pd
import pytest
from scipy import stats

from survbench.lib import ConfigError, Undefined, UndefinedTestError
from survbench.stats import (
    benjamini_hochberg,
    chi_square_2x2,
    cohort_table,
    mann_whitney_u,
    pearson_r,
    welch_t,
    wilcoxon_signed_rank,
)


def _exact_wilcoxon(d: np.ndarray) -> float:
    ranks = stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    signs = (np.arange(2 ** len(d))[:, None] >> np.arange(len(d))[None, :]) & 1
    null = signs @ ranks
    return min(1.0, 2.0 * min(np.mean(null <= w), np.mean(null >= w)))


def test_wilcoxon_all_positive():
    assert wilcoxon_signed_rank([0.61, 0.62, 0.63, 0.64, 0.65], [0.5] * 5) == pytest.approx(1 / 16, abs=1e-15)
    return


def test_wilcoxon_antisymmetric():
    assert wilcoxon_signed_rank([1.0, -1.0, 2.0, -2.0]) == 1.0
    return


def test_wilcoxon_drops_zero_differences():
    assert wilcoxon_signed_rank([1.0, 2.0, 3.0, 0.0], [0.0, 0.0, 0.0, 0.0]) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(UndefinedTestError):
        wilcoxon_signed_rank([0.7, 0.7], [0.7, 0.7])
    return


@pytest.mark.parametrize("seed", range(5))
def test_wilcoxon_normal_approximation(seed):
    d = np.random.default_rng(seed).normal(0.3, 1.0, 13)

    assert abs(wilcoxon_signed_rank(d) - _exact_wilcoxon(d)) < 0.02
    return


def test_mann_whitney():
    assert mann_whitney_u([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]) == pytest.approx(0.1, abs=1e-15)
    assert mann_whitney_u([4.0, 5.0, 6.0], [1.0, 2.0, 3.0]) == pytest.approx(0.1, abs=1e-15)
    assert mann_whitney_u([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == 1.0
    return


def test_mann_whitney_large_samples():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0.0, 1.0, 30), rng.normal(1.5, 1.0, 30)

    assert mann_whitney_u(a, b) < 1e-4
    assert mann_whitney_u(a, b) == mann_whitney_u(b, a)
    with pytest.raises(UndefinedTestError):
        mann_whitney_u([], [1.0])
    return


def test_pearson_linear():
    r, p = pearson_r([1.0, 2.0, 3.0, 4.0], [3.0, 5.0, 7.0, 9.0])

    assert r == pytest.approx(1.0, abs=1e-12)
    assert p < 1e-6
    return


def test_pearson_matches_direct_formula():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=10), rng.normal(size=10)

    r, p = pearson_r(x, y)

    assert r == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    assert p == pytest.approx(stats.pearsonr(x, y)[1], abs=1e-10)
    return


@pytest.mark.parametrize("x, y", [([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]), ([1.0, 2.0], [2.0, 1.0])])
def test_pearson_undefined(x, y):
    with pytest.raises(UndefinedTestError):
        pearson_r(x, y)
    return


@pytest.mark.parametrize(
    "p_values, q, rejected",
    [
        ([0.04], 0.05, [True]),
        ([0.01, 0.04, 0.03], 0.05, [True, True, True]),
        ([0.01, 0.2, 0.5], 0.05, [True, False, False]),
        ([1.0, 1.0], 0.05, [False, False]),
    ],
)
def test_benjamini_hochberg(p_values, q, rejected):
    reject, adjusted = benjamini_hochberg(p_values, q)

    assert list(reject) == rejected
    assert ((adjusted >= np.asarray(p_values)) & (adjusted <= 1.0)).all()
    return


def test_benjamini_hochberg_monotone_in_q():
    p = np.random.default_rng(2).random(30) ** 3
    counts = [benjamini_hochberg(p, q)[0].sum() for q in (0.01, 0.05, 0.1, 0.2)]

    assert counts == sorted(counts)
    with pytest.raises(ConfigError):
        benjamini_hochberg([1.5])
    return


def test_chi_square():
    statistic, p = chi_square_2x2([[20, 10], [10, 20]])
    assert statistic == pytest.approx(20 / 3, abs=1e-9)
    assert 0 < p < 0.05

    statistic, p = chi_square_2x2([[10, 10], [10, 10]])
    assert statistic == 0.0
    assert p == 1.0
    with pytest.raises(UndefinedTestError):
        chi_square_2x2([[0, 0], [3, 4]])
    return


def test_welch_identical_groups():
    statistic, p = welch_t([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    assert statistic == 0.0
    assert p == 1.0
    with pytest.raises(UndefinedTestError):
        welch_t([2.0, 2.0], [2.0, 2.0])
    return


def test_cohort_table(make_cohort):
    events = np.array([True, True, True, False, False, False])
    covariates = pd.DataFrame({"age": [70.0, 65.0, 72.0, 40.0, 45.0, 38.0], "sex": [1.0, 1.0, 0.0, 0.0, 0.0, 1.0]})
    cohort = make_cohort(np.full(6, 100.0), events, covariates=covariates)

    table = cohort_table(cohort)

    assert list(table["variable"]) == ["n", "sex (M)", "age"]
    assert list(table.iloc[0][["event", "no_event"]]) == ["3", "3"]
    assert table.iloc[1]["event"] == "2 (66.7%)"
    assert table.iloc[2]["test"] == "welch-t"
    assert table.iloc[2]["p_value"] < 0.01
    return


def test_cohort_table_degenerate(make_cohort):
    cohort = make_cohort(np.full(3, 100.0), np.zeros(3, dtype=bool))

    table = cohort_table(cohort, grouping=1)

    assert isinstance(table.iloc[1]["p_value"], Undefined)
    assert table.attrs["undefined"] == 2
    return
