"""Aggregate finished runs into CSV tables and SVG figures."""

import pathlib

import numpy as np
import pandas as pd
from loguru import logger as log

from survbench.data import Split, event_rate_table
from survbench.ledger import RunLedger
from survbench.lib import (
    ConfigError,
    StateError,
    Undefined,
    defined_or_undefined,
    from_jsonable,
    is_defined,
)
from survbench.metrics import population_survival, subgroup_concordance, summarize
from survbench.stats import benjamini_hochberg, cohort_table, mann_whitney_u, pearson_r, wilcoxon_signed_rank
from survbench.svg import box_plot, km_plot
from survbench.sweep import SweepConfig, clear_cohorts, load_curves
from survbench.training import CLASSIFIERS

AXES = ("dataset", "encoder", "method", "covariates")


def config_label(row) -> str:
    return "/".join(str(row[axis]) for axis in AXES)


def results_frame(records: list) -> pd.DataFrame:
    """One row per finished run: the run axes plus every scalar metric.

    Bootstrap summaries contribute their median as ``bootstrap_concordance``.
    """
    rows = []
    for record in records:
        metrics = from_jsonable(record["metrics"])
        row = {"key": record["key"], **{axis: record[axis] for axis in AXES}, "seed": record["seed"]}
        for name, value in metrics.items():
            row[name] = value["median"] if isinstance(value, dict) else value
        rows.append(row)
    frame = pd.DataFrame(rows)
    frame["label"] = [config_label(row) for _, row in frame.iterrows()]
    return frame


def metric_columns(frame: pd.DataFrame) -> list:
    return [c for c in frame.columns if c not in AXES + ("key", "seed", "label")]


def summary_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Median and 25th/75th percentiles across seeds per configuration and metric."""
    rows = []
    for group, part in frame.groupby(list(AXES), sort=True):
        for metric in metric_columns(frame):
            summary = summarize(list(part[metric]))
            rows.append(dict(zip(AXES, group)) | {"metric": metric} | summary)
    return pd.DataFrame(rows, columns=list(AXES) + ["metric", "median", "q25", "q75", "n", "n_undefined"])


def _by_seed(frame: pd.DataFrame, label: str, metric: str) -> dict:
    part = frame[frame["label"] == label]
    return dict(zip(part["seed"], part[metric]))


def compare(frame: pd.DataFrame, comparisons: list, q: float = 0.05) -> pd.DataFrame:
    """Pairwise configuration tests with Benjamini-Hochberg over the whole family.

    Two configurations run on the same seeds are paired by seed (Wilcoxon signed
    rank); otherwise they are compared as independent samples (Mann-Whitney U).
    """
    labels = set(frame["label"])
    rows = []
    for comparison in comparisons:
        a, b = comparison["a"], comparison["b"]
        metric = comparison.get("metric", "concordance")
        for label in (a, b):
            if label not in labels:
                raise ConfigError(f"comparison names unknown configuration {label!r}")
        if metric not in frame.columns or metric in AXES + ("key", "seed", "label"):
            raise ConfigError(f"comparison names unknown metric {metric!r}")

        values_a = _by_seed(frame, a, metric)
        values_b = _by_seed(frame, b, metric)
        if set(values_a) == set(values_b):
            seeds = [s for s in sorted(values_a) if is_defined(values_a[s]) and is_defined(values_b[s])]
            x = [values_a[s] for s in seeds]
            y = [values_b[s] for s in seeds]
            test = "wilcoxon"
            p = defined_or_undefined(wilcoxon_signed_rank, x, y) if seeds else Undefined("no defined pairs")
        else:
            x = [v for v in values_a.values() if is_defined(v)]
            y = [v for v in values_b.values() if is_defined(v)]
            test = "mann-whitney"
            p = defined_or_undefined(mann_whitney_u, x, y)
        rows.append(
            {
                "a": a,
                "b": b,
                "metric": metric,
                "test": test,
                "n_a": len(x),
                "n_b": len(y),
                "median_a": summarize(x)["median"],
                "median_b": summarize(y)["median"],
                "p_value": p,
            }
        )

    table = pd.DataFrame(rows, columns=["a", "b", "metric", "test", "n_a", "n_b", "median_a", "median_b", "p_value"])
    defined = [i for i, p in enumerate(table["p_value"]) if is_defined(p)]
    reject, adjusted = benjamini_hochberg([table["p_value"][i] for i in defined], q)
    table["p_adjusted"] = [Undefined("test undefined")] * len(table)
    table["reject"] = False
    for i, r, adj in zip(defined, reject, adjusted):
        table.at[i, "p_adjusted"] = float(adj)
        table.at[i, "reject"] = bool(r)
    return table


def horizon_correlation(frame: pd.DataFrame, metric: str = "concordance") -> pd.DataFrame:
    """Pearson correlation of classifier horizon (years) and ``metric`` across Cla-H runs."""
    rows = []
    classifiers = frame[frame["method"].isin(list(CLASSIFIERS))]
    for group, part in classifiers.groupby(["dataset", "encoder", "covariates"], sort=True):
        defined = part[[is_defined(v) for v in part[metric]]]
        horizons = defined["method"].map(CLASSIFIERS).to_numpy(dtype=np.float64)
        values = defined[metric].to_numpy(dtype=np.float64)
        result = defined_or_undefined(pearson_r, horizons, values)
        r, p = result if isinstance(result, tuple) else (result, result)
        rows.append(dict(zip(("dataset", "encoder", "covariates"), group)) | {"n": len(defined), "r": r, "p_value": p})
    return pd.DataFrame(rows, columns=["dataset", "encoder", "covariates", "n", "r", "p_value"])


def subgroup_table(config: SweepConfig, records: list) -> pd.DataFrame:
    """Age-bin x sex concordance of every finished run, from its persisted Test curves."""
    parts = []
    for record in records:
        curves, times, events, _, covariates = load_curves(config.output_dir / record["artifacts"]["curves"])
        table = subgroup_concordance(curves, times, events, covariates, weighting=config.evaluation.weighting)
        for axis in ("key",) + AXES + ("seed",):
            table[axis] = record[axis]
        parts.append(table)
    frame = pd.concat(parts, ignore_index=True)
    return frame[["key", *AXES, "seed", "age_bin", "sex", "n", "events", "concordance"]]


def _write_csv(frame: pd.DataFrame, path: pathlib.Path) -> pathlib.Path:
    frame = frame.map(lambda v: f"undefined: {v.reason}" if isinstance(v, Undefined) else v)
    frame.to_csv(path, index=False)
    log.debug(f"wrote {path}")
    return path


def _safe_name(label: str) -> str:
    return label.replace("/", "_").replace("+", "-")


def plot_run_survival(config: SweepConfig, record: dict, path) -> pd.DataFrame:
    """Kaplan-Meier on the Test split against the population-average predicted curve."""
    curves, times, events, _, _ = load_curves(config.output_dir / record["artifacts"]["curves"])
    table = population_survival(
        curves, reps=config.evaluation.population_reps, seed=record["seed"], times=times, events=events
    )
    km_plot(table, path, title=f"{config_label(record)} seed {record['seed']}")
    return table


def build_report(config: SweepConfig) -> dict:
    """Write every table and figure of the report under ``<output_dir>/report``.

    Returns
    -------
    :class:`dict`
        Artifact name -> written path.
    """
    records = RunLedger(config.results_path).done
    if not records:
        raise StateError(f"no finished runs in {config.results_path}")
    out = config.output_dir / "report"
    (out / "km").mkdir(parents=True, exist_ok=True)
    frame = results_frame(records)
    written = {}

    written["summary"] = _write_csv(summary_table(frame), out / "summary.csv")
    written["comparisons"] = _write_csv(compare(frame, config.comparisons), out / "comparisons.csv")
    written["horizon_correlation"] = _write_csv(horizon_correlation(frame), out / "horizon_correlation.csv")
    written["subgroups"] = _write_csv(subgroup_table(config, records), out / "subgroups.csv")

    for dataset in config.datasets:
        cohort = dataset.split_cohort(config.seeds[0])
        rates = event_rate_table(cohort, sorted(config.evaluation.horizons_years))
        written[f"event_rates_{dataset.name}"] = _write_csv(rates, out / f"event_rates_{dataset.name}.csv")
        table = cohort_table(cohort.select(Split.TEST))
        written[f"cohort_{dataset.name}"] = _write_csv(table, out / f"cohort_{dataset.name}.csv")

        part = frame[frame["dataset"] == dataset.name]
        if len(part):
            groups = {label: list(p["concordance"]) for label, p in part.groupby("label", sort=True)}
            path = out / f"concordance_{dataset.name}.svg"
            box_plot(groups, path, title=f"Test concordance on {dataset.name}")
            written[f"concordance_{dataset.name}"] = path
    clear_cohorts()

    by_label = {}
    for record in records:
        label = config_label(record)
        if label not in by_label or record["seed"] < by_label[label]["seed"]:
            by_label[label] = record
    for label, record in sorted(by_label.items()):
        path = out / "km" / f"{_safe_name(label)}.svg"
        plot_run_survival(config, record, path)
        written[f"km_{label}"] = path

    log.success(f"report with {len(written)} artifacts written to {out}")
    return written
