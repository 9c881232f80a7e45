"""Statistical comparisons for sweep results and cohort tables.

All tests are two-sided. Exact discrete tests double the smaller tail and cap at 1.
"""

import itertools

import numpy as np
import pandas as pd
from scipy import stats

from survbench.data import BASE_COVARIATES, Cohort, horizon_labels
from survbench.lib import YEAR_DAYS, ConfigError, Undefined, UndefinedTestError, defined_or_undefined

WILCOXON_EXACT_MAX = 12
MANN_WHITNEY_EXACT_MAX = 14


def _two_sided(lower: float, upper: float) -> float:
    return float(min(1.0, 2.0 * min(lower, upper)))


def _tie_term(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    return float((counts**3 - counts).sum())


def wilcoxon_signed_rank(x, y=None) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test on ``x - y``.

    Zero differences are dropped. With at most 12 nonzero differences the null
    distribution of the positive rank sum is enumerated over all sign patterns
    (midranks for ties); otherwise a normal approximation with tie and continuity
    corrections is used.

    Raises
    ------
    :class:`survbench.lib.UndefinedTestError`
        Every difference is zero.
    """
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if not n:
        raise UndefinedTestError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()

    if n <= WILCOXON_EXACT_MAX:
        signs = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        null = signs @ ranks
        return _two_sided(np.mean(null <= w), np.mean(null >= w))

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(ranks) / 48.0
    z = max(abs(w - mean) - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def mann_whitney_u(a, b) -> float:
    """Two-sided p-value of the Mann-Whitney U test.

    Exact enumeration of rank-sum splits for ``m + n <= 14``, tie-corrected normal
    approximation with continuity correction otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = len(a), len(b)
    if not (m and n):
        raise UndefinedTestError("Mann-Whitney needs two nonempty samples")
    ranks = stats.rankdata(np.concatenate([a, b]))
    offset = m * (m + 1) / 2.0
    u = ranks[:m].sum() - offset

    if m + n <= MANN_WHITNEY_EXACT_MAX:
        null = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(m + n), m)]) - offset
        return _two_sided(np.mean(null <= u), np.mean(null >= u))

    total = m + n
    var = m * n / 12.0 * ((total + 1) - _tie_term(ranks) / (total * (total - 1)))
    if var <= 0:
        return 1.0
    z = max(abs(u - m * n / 2.0) - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def pearson_r(x, y) -> tuple:
    """Sample correlation and its two-sided p-value from ``t = r sqrt((n - 2) / (1 - r^2))``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError(f"pearson_r needs equal lengths, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 3:
        raise UndefinedTestError(f"pearson_r needs at least 3 points, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = (dx**2).sum(), (dy**2).sum()
    if sxx == 0 or syy == 0:
        raise UndefinedTestError("pearson_r is undefined for a constant sample")
    r = float(np.clip((dx * dy).sum() / np.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r**2))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


def benjamini_hochberg(p_values, q: float = 0.05) -> tuple:
    """Step-up false discovery rate control.

    Returns
    -------
    reject, adjusted : :class:`numpy.ndarray`, :class:`numpy.ndarray`
        Rejection flags and adjusted p-values, in input order.
    """
    p = np.asarray(p_values, dtype=np.float64)
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise ConfigError("p-values must lie in [0, 1]")
    m = len(p)
    if not m:
        return np.zeros(0, dtype=bool), np.zeros(0)
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    k = np.arange(1, m + 1)

    passing = np.flatnonzero(ranked <= q * k / m)
    reject = np.zeros(m, dtype=bool)
    if len(passing):
        reject[order[: passing[-1] + 1]] = True

    adjusted = np.empty(m)
    adjusted[order] = np.minimum(np.minimum.accumulate((ranked * m / k)[::-1])[::-1], 1.0)
    return reject, adjusted


def chi_square_2x2(table) -> tuple:
    """Pearson chi-square (no continuity correction) of a 2x2 table; ``(statistic, p)``."""
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (2, 2):
        raise ConfigError(f"chi-square needs a 2x2 table, got {table.shape}")
    if (table.sum(axis=0) == 0).any() or (table.sum(axis=1) == 0).any():
        raise UndefinedTestError("chi-square table has an empty row or column")
    statistic, p, _, _ = stats.chi2_contingency(table, correction=False)
    return float(statistic), float(p)


def welch_t(a, b) -> tuple:
    """Welch's unequal-variance t-test; ``(statistic, p)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise UndefinedTestError("Welch's t needs at least two values per group")
    if a.var() == 0 and b.var() == 0:
        raise UndefinedTestError("Welch's t is undefined for two constant groups")
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


def _mean_std(values: np.ndarray) -> str:
    if not len(values):
        return "-"
    return f"{values.mean():.2f} ({values.std(ddof=1) if len(values) > 1 else 0.0:.2f})"


def _count_percent(hits: int, total: int) -> str:
    return f"{hits} ({100.0 * hits / total:.1f}%)" if total else "0 (-)"


def cohort_table(cohort: Cohort, grouping="event") -> pd.DataFrame:
    """Summary of covariates by outcome group.

    ``grouping`` is ``"event"`` (any observed event) or a horizon in years
    (event observed by then). Sex is compared by chi-square, numeric covariates
    by Welch's t; degenerate cells carry :class:`survbench.lib.Undefined`.
    """
    if grouping == "event":
        positive = cohort.events
    else:
        positive = horizon_labels(cohort.times, cohort.events, float(grouping) * YEAR_DAYS).astype(bool)
    negative = ~positive
    columns = ["variable", "event", "no_event", "test", "statistic", "p_value"]
    rows = [["n", str(int(positive.sum())), str(int(negative.sum())), "", None, None]]

    covariates = cohort.covariates
    if "sex" in covariates:
        male = covariates["sex"].to_numpy() == 1.0
        table = [
            [np.sum(male & positive), np.sum(~male & positive)],
            [np.sum(male & negative), np.sum(~male & negative)],
        ]
        result = defined_or_undefined(chi_square_2x2, table)
        statistic, p = result if isinstance(result, tuple) else (result, result)
        rows.append(
            [
                "sex (M)",
                _count_percent(int(table[0][0]), int(positive.sum())),
                _count_percent(int(table[1][0]), int(negative.sum())),
                "chi-square",
                statistic,
                p,
            ]
        )

    numeric = [c for c in covariates.columns if c != "sex"]
    numeric.sort(key=lambda c: (c not in BASE_COVARIATES, c))
    for name in numeric:
        values = covariates[name].to_numpy()
        result = defined_or_undefined(welch_t, values[positive], values[negative])
        statistic, p = result if isinstance(result, tuple) else (result, result)
        rows.append([name, _mean_std(values[positive]), _mean_std(values[negative]), "welch-t", statistic, p])

    frame = pd.DataFrame(rows, columns=columns)
    frame.attrs["undefined"] = int(sum(isinstance(v, Undefined) for v in frame["p_value"]))
    return frame
