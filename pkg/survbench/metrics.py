"""Censoring-aware evaluation of survival predictions.

Predictions are either a :class:`survbench.classic.SurvivalCurve` or a vector of
constant-in-time risks; a risk vector ranks like curves ordered inversely to risk.
"""

import numpy as np
import pandas as pd
from loguru import logger as log
from sklearn.metrics import average_precision_score, roc_auc_score

from survbench.classic import SurvivalCurve, censoring_km, kaplan_meier
from survbench.data import Cohort, horizon_labels
from survbench.lib import (
    YEAR_DAYS,
    BootstrapError,
    ConfigError,
    ShapeError,
    Undefined,
    UndefinedMetricError,
    is_defined,
    make_rng,
)

WEIGHTINGS = ("none", "km")
CENSORING_FLOOR = 0.05
AGE_BINS = ((0.0, 20.0, "[0,20)"), (20.0, 40.0, "[20,40)"), (40.0, 60.0, "[40,60)"), (60.0, np.inf, "60+"))
SEX_LABELS = {0.0: "F", 1.0: "M"}
MIN_SUBGROUP_PAIRS = 2
_CHUNK = 512


def _check_inputs(prediction, times, events) -> tuple:
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    n = len(prediction) if isinstance(prediction, SurvivalCurve) else np.asarray(prediction).reshape(-1).size
    if not (len(times) == len(events) == n):
        raise ShapeError(f"predictions ({n}), times ({len(times)}) and events ({len(events)}) differ in length")
    return times, events


def _pair_weights(times, events, weighting: str) -> np.ndarray:
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if weighting == "none" or not len(times):
        return np.ones(len(times))
    g = censoring_km(times, events).left_limit(times)
    clamped = events & (g < CENSORING_FLOOR)
    if clamped.any():
        log.warning(f"censoring survival below {CENSORING_FLOOR} for {clamped.sum()} events; weights clamped")
    return np.maximum(g, CENSORING_FLOOR) ** -2.0


def _concordance_parts(prediction, times, events, weighting: str) -> tuple:
    """(weighted score sum, weighted pair count, number of comparable pairs)."""
    times, events = _check_inputs(prediction, times, events)
    weights = _pair_weights(times, events, weighting)

    if isinstance(prediction, SurvivalCurve):
        values = prediction.values
        columns = prediction.grid.nearest_index(times)
    else:
        values = -np.asarray(prediction, dtype=np.float64).reshape(-1, 1)
        columns = np.zeros(len(times), dtype=np.int64)

    score, total, pairs = 0.0, 0.0, 0
    anchors = np.flatnonzero(events)
    for start in range(0, len(anchors), _CHUNK):
        i = anchors[start : start + _CHUNK]
        ti = times[i][:, None]
        comparable = (ti < times[None, :]) | ((ti == times[None, :]) & ~events[None, :])
        own = values[i, columns[i]][:, None]
        others = values[:, columns[i]].T
        wins = np.where(own < others, 1.0, np.where(own == others, 0.5, 0.0))
        counts = comparable.sum(axis=1)
        score += float(weights[i] @ (wins * comparable).sum(axis=1))
        total += float(weights[i] @ counts)
        pairs += int(counts.sum())
    return score, total, pairs


def concordance_td(prediction, times, events, weighting: str = "none") -> float:
    """Time-dependent concordance.

    Pairs ``(i, j)`` are comparable when ``i`` has an event and
    ``T_i < T_j`` or ``T_i == T_j`` with ``j`` censored. The pair scores 1 when
    ``S_i(T_i) < S_j(T_i)``, 0.5 on a tie, 0 otherwise, with survival read at the
    grid point nearest to ``T_i``. ``weighting="km"`` weights each pair by
    ``G(T_i-) ** -2``, with ``G`` the censoring Kaplan-Meier floored at 0.05.

    Raises
    ------
    :class:`survbench.lib.UndefinedMetricError`
        No comparable pairs.
    """
    score, total, pairs = _concordance_parts(prediction, times, events, weighting)
    if not pairs:
        raise UndefinedMetricError("no comparable pairs")
    return score / total


def censor_at(times, events, horizon: float) -> tuple:
    """Administrative censoring at ``horizon`` days."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    return np.minimum(times, horizon), events & (times <= horizon)


def concordance_censored_at(prediction, times, events, years: float, weighting: str = "none") -> float:
    """:func:`concordance_td` with event times censored at ``years``."""
    if not years > 0:
        raise ConfigError(f"censoring horizon must be positive, got {years}")
    times, events = censor_at(times, events, years * YEAR_DAYS)
    return concordance_td(prediction, times, events, weighting=weighting)


def horizon_scores(prediction, horizon_days: float) -> np.ndarray:
    """``1 - S(t*)`` at the grid point nearest to the horizon; risk vectors pass through."""
    if isinstance(prediction, SurvivalCurve):
        if not 0 < horizon_days <= prediction.grid.t_max:
            raise UndefinedMetricError(f"horizon {horizon_days:.1f} days outside grid span {prediction.grid.t_max:.1f}")
        return 1.0 - prediction.at(horizon_days)
    return np.asarray(prediction, dtype=np.float64).reshape(-1)


def horizon_roc_prc(prediction, times, events, years: float) -> tuple:
    """(AUROC, AUPRC) of horizon mortality; censored-before-horizon records are negatives.

    Raises
    ------
    :class:`survbench.lib.UndefinedMetricError`
        Labels have a single class or the horizon lies outside the grid.
    """
    times, events = _check_inputs(prediction, times, events)
    horizon = years * YEAR_DAYS
    labels = horizon_labels(times, events, horizon)
    scores = horizon_scores(prediction, horizon)
    if labels.min(initial=0) == labels.max(initial=0):
        raise UndefinedMetricError(f"horizon labels at {years:g} years have a single class")
    return float(roc_auc_score(labels, scores)), float(average_precision_score(labels, scores))


def summarize(values) -> dict:
    """Median and linear 25th/75th percentiles over the defined values."""
    defined = np.array([v for v in values if is_defined(v)], dtype=np.float64)
    undefined = len(values) - len(defined)
    if not len(defined):
        reason = Undefined("no defined values")
        return {"median": reason, "q25": reason, "q75": reason, "n": 0, "n_undefined": undefined}
    q25, median, q75 = np.quantile(defined, [0.25, 0.5, 0.75])
    return {"median": float(median), "q25": float(q25), "q75": float(q75), "n": len(defined), "n_undefined": undefined}


def one_per_patient(patient_ids, rng: np.random.Generator) -> np.ndarray:
    """Sorted record indices holding exactly one uniformly drawn record per patient."""
    _, owner, counts = np.unique(np.asarray(patient_ids, dtype=str), return_inverse=True, return_counts=True)
    order = np.argsort(owner, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    picks = starts + rng.integers(0, counts)
    return np.sort(order[picks])


def bootstrap_per_patient(metric, cohort: Cohort, reps: int = 20, seed: int = 0) -> dict:
    """Evaluate ``metric(indices)`` on ``reps`` draws of one ECG per patient.

    ``cohort`` may also be the bare patient id array of the evaluated records.

    Returns
    -------
    :class:`dict`
        ``values`` (one per replicate) plus the :func:`summarize` entries.

    Raises
    ------
    :class:`survbench.lib.BootstrapError`
        The metric failed; carries the replicate index.
    """
    if reps < 1:
        raise ConfigError(f"bootstrap needs at least one replicate, got {reps}")
    patient_ids = cohort.patient_ids if isinstance(cohort, Cohort) else np.asarray(cohort)
    rng = make_rng(seed)
    values = []
    for rep in range(reps):
        index = one_per_patient(patient_ids, rng)
        try:
            values.append(metric(index))
        except Exception as err:
            raise BootstrapError(rep, err) from err
    return {"values": values, **summarize(values)}


def population_survival(curves: SurvivalCurve, reps: int = 100, seed: int = 0, times=None, events=None) -> pd.DataFrame:
    """Bootstrap band of the population-average survival curve.

    Per replicate the records are resampled with replacement and averaged; the
    median and 2.5/97.5 percentiles are taken per grid point. When ``times`` and
    ``events`` are given, the Kaplan-Meier estimate and the number still under
    observation are added per grid point.
    """
    if not len(curves):
        raise ShapeError("population survival needs at least one curve")
    rng = make_rng(seed)
    n = len(curves)
    means = np.empty((reps, curves.values.shape[1]))
    for rep in range(reps):
        means[rep] = curves.values[rng.integers(0, n, n)].mean(axis=0)
    lower, median, upper = np.percentile(means, [2.5, 50.0, 97.5], axis=0)

    points = curves.grid.points
    table = pd.DataFrame({"time": points, "median": median, "lower": lower, "upper": upper})
    if times is not None:
        times, events = _check_inputs(curves, times, events)
        table["kaplan_meier"] = kaplan_meier(times, events)(points)
        table["at_risk"] = (times[None, :] >= points[:, None]).sum(axis=1)
    return table


def _age_bin(age: np.ndarray) -> np.ndarray:
    labels = np.empty(len(age), dtype=object)
    for low, high, label in AGE_BINS:
        labels[(age >= low) & (age < high)] = label
    return labels


def subgroup_concordance(prediction, times, events, covariates: pd.DataFrame, weighting: str = "none") -> pd.DataFrame:
    """Concordance per (age bin, sex) cell.

    Every cell is listed with its record and event counts; cells with fewer than
    two comparable pairs carry :class:`survbench.lib.Undefined`.
    """
    times, events = _check_inputs(prediction, times, events)
    if not {"age", "sex"} <= set(covariates.columns):
        raise ConfigError("subgroup concordance needs age and sex covariates")
    ages = _age_bin(covariates["age"].to_numpy(dtype=np.float64))
    sexes = covariates["sex"].to_numpy(dtype=np.float64)

    rows = []
    for _, _, age_label in AGE_BINS:
        for code, sex_label in SEX_LABELS.items():
            members = np.flatnonzero((ages == age_label) & (sexes == code))
            if isinstance(prediction, SurvivalCurve):
                part = prediction.subset(members)
            else:
                part = np.asarray(prediction, dtype=np.float64).reshape(-1)[members]
            value = Undefined("fewer than 2 comparable pairs")
            if len(members):
                score, total, pairs = _concordance_parts(part, times[members], events[members], weighting)
                if pairs >= MIN_SUBGROUP_PAIRS:
                    value = score / total
            rows.append([age_label, sex_label, len(members), int(events[members].sum()), value])
    return pd.DataFrame(rows, columns=["age_bin", "sex", "n", "events", "concordance"])
