"""Sweep configuration, run expansion, execution and cross-dataset evaluation."""

import dataclasses
import fnmatch
import hashlib
import json
import pathlib
import time
from multiprocessing import Pool

import numpy as np
import pandas as pd
from loguru import logger as log

from survbench.classic import CoxModel, SurvivalCurve, TimeGrid, fit_classifier_cox, predict_survival
from survbench.data import (
    METADATA_COLUMNS,
    TARGET_RATE,
    Cohort,
    Normalizer,
    Split,
    SplitSpec,
    apply_normalizer,
    fit_apply_normalizer,
    load_cohort,
    split_by_patient,
)
from survbench.ledger import RunLedger, RunState
from survbench.lib import (
    HORIZONS_YEARS,
    ConfigError,
    ConsistencyError,
    SurvbenchError,
    Undefined,
    defined_or_undefined,
)
from survbench.metrics import (
    WEIGHTINGS,
    bootstrap_per_patient,
    concordance_censored_at,
    concordance_td,
    horizon_roc_prc,
    summarize,
)
from survbench.network import ENCODERS, FusionNet
from survbench.synthetic import SyntheticSpec, generate
from survbench.training import (
    CLASSIFIERS,
    METHODS,
    DeepSurvBaseline,
    TrainConfig,
    head_dim,
    load_checkpoint,
    predict_curves,
    save_checkpoint,
    train,
)

SCHEMA = 1
COVARIATE_SETS = ("none", "age+sex", "age+sex+machine")

_COHORTS = {}


@dataclasses.dataclass(frozen=True)
class Evaluation:
    """What to compute on every Test split."""

    horizons_years: tuple = HORIZONS_YEARS
    weighting: str = "km"
    bootstrap_reps: int = 20
    population_reps: int = 100

    def __post_init__(self):
        horizons = tuple(float(h) for h in self.horizons_years)
        if not horizons or any(h <= 0 for h in horizons):
            raise ConfigError(f"evaluation horizons must be positive, got {horizons}")
        object.__setattr__(self, "horizons_years", horizons)
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.bootstrap_reps < 0 or self.population_reps < 1:
            raise ConfigError("bootstrap_reps must be nonnegative and population_reps positive")

    @classmethod
    def from_json(cls, data: dict) -> "Evaluation":
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown evaluation settings: {unknown}")
        return cls(**data)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    pass


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    """A named cohort: generated from a :class:`survbench.synthetic.SyntheticSpec` or read from files."""

    name: str
    synthetic: SyntheticSpec = None
    metadata: str = None
    waveforms: str = None
    source_rate: float = TARGET_RATE
    split: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_json(cls, data: dict) -> "DatasetSpec":
        data = dict(data)
        unknown = sorted(set(data) - {"name", "synthetic", "metadata", "waveforms", "source_rate", "split"})
        if unknown:
            raise ConfigError(f"unknown dataset keys: {unknown}")
        if "name" not in data:
            raise ConfigError("every dataset needs a name")
        if ("synthetic" in data) == ("metadata" in data):
            raise ConfigError(f"dataset {data['name']!r} needs exactly one of 'synthetic' or 'metadata'")
        if "metadata" in data and "waveforms" not in data:
            raise ConfigError(f"dataset {data['name']!r} has metadata but no waveforms")
        if "synthetic" in data:
            data["synthetic"] = SyntheticSpec.from_json(data["synthetic"])
        unknown = sorted(set(data.get("split", {})) - {"fractions", "fixed_test", "test_seed"})
        if unknown:
            raise ConfigError(f"unknown split keys in dataset {data['name']!r}: {unknown}")
        spec = cls(**data)
        spec.split_spec(0)
        return spec

    def to_json(self) -> dict:
        data = {"name": self.name, "split": self.split}
        if self.synthetic is not None:
            data["synthetic"] = self.synthetic.to_json()
        else:
            data.update(metadata=self.metadata, waveforms=self.waveforms, source_rate=self.source_rate)
        return data

    def split_spec(self, seed: int) -> SplitSpec:
        """Per-seed split; Test stays fixed across seeds (``test_seed`` defaults to 0)."""
        fixed_test = self.split.get("fixed_test")
        test_seed = self.split.get("test_seed", None if fixed_test else 0)
        return SplitSpec(
            fractions=tuple(self.split.get("fractions", SplitSpec.fractions)),
            seed=int(seed),
            fixed_test=fixed_test,
            test_seed=test_seed,
        )

    @property
    def has_machine_measures(self) -> bool:
        if self.synthetic is not None:
            return self.synthetic.machine_measures
        columns = pd.read_csv(self.metadata, nrows=0).columns
        return bool(set(columns) - set(METADATA_COLUMNS))

    def raw_cohort(self) -> Cohort:
        """Unnormalized cohort, loaded once per process."""
        cache_key = json.dumps(self.to_json(), sort_keys=True)
        if cache_key not in _COHORTS:
            log.info(f"loading dataset {self.name}")
            if self.synthetic is not None:
                cohort = generate(self.synthetic)[0]
            else:
                cohort = load_cohort(self.metadata, self.waveforms, self.source_rate)
            _COHORTS[cache_key] = cohort
            log.success(f"dataset {self.name}: {len(cohort)} records, {cohort.events.mean():.1%} events")
        return _COHORTS[cache_key]

    def split_cohort(self, seed: int) -> Cohort:
        cohort = self.raw_cohort()
        return cohort.with_split(split_by_patient(cohort, self.split_spec(seed)))

    pass


def clear_cohorts() -> None:
    """Drop the cohorts this process has loaded."""
    if _COHORTS:
        log.debug(f"releasing {len(_COHORTS)} cached cohorts")
    _COHORTS.clear()
    return


class SweepConfig(object):
    """Parsed sweep configuration file.

    Chronologically, :meth:`__init__` checks the schema version, parses the config
    :class:`dict` onto attributes and validates every sweep axis.

    Parameters
    ----------
    config : :class:`dict`
    """

    DEFAULTS = {
        "encoders": ["TabularZero", "WaveStats"],
        "methods": list(METHODS),
        "covariate_sets": ["none", "age+sex"],
        "seeds": [0, 1, 2],
        "train": {},
        "evaluation": {},
        "comparisons": [],
        "output_dir": "survbench_out",
    }

    def __init__(self, config: dict) -> None:
        self.config = config
        self._parse_config(config)
        self._validate_axes()
        return

    @classmethod
    def from_file(cls, path, **overrides) -> "SweepConfig":
        """Read a JSON config; non-None ``overrides`` replace top-level keys."""
        try:
            with open(path) as stream:
                config = json.load(stream)
        except ValueError as err:
            raise ConfigError(f"{path} is not valid JSON: {err}") from err
        return cls({**config, **{k: v for k, v in overrides.items() if v is not None}})

    def _parse_config(self, config: dict) -> bool:
        if not isinstance(config, dict):
            raise ConfigError(f"config must be a JSON object, got {type(config).__name__}")
        if config.get("schema") != SCHEMA:
            raise ConfigError(f"config schema must be {SCHEMA}, got {config.get('schema')!r}")
        unknown = sorted(set(config) - set(self.DEFAULTS) - {"schema", "datasets"})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if not config.get("datasets"):
            raise ConfigError("config lists no datasets")

        for varname, value in {**self.DEFAULTS, **config}.items():
            setattr(self, varname, value)

        self.datasets = [DatasetSpec.from_json(d) for d in self.datasets]
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError(f"dataset names must be unique, got {names}")
        self.evaluation = Evaluation.from_json(self.evaluation)
        TrainConfig.from_json(self.train)
        for comparison in self.comparisons:
            if not isinstance(comparison, dict) or not {"a", "b"} <= set(comparison) or set(comparison) - {"a", "b", "metric"}:
                raise ConfigError(f"comparisons need 'a' and 'b' labels and an optional 'metric', got {comparison!r}")
        self.output_dir = pathlib.Path(self.output_dir)
        return True

    def _validate_axes(self) -> None:
        axes = {
            "encoders": (self.encoders, ENCODERS),
            "methods": (self.methods, METHODS),
            "covariate_sets": (self.covariate_sets, COVARIATE_SETS),
        }
        for name, (values, allowed) in axes.items():
            if not values:
                raise ConfigError(f"sweep axis {name} is empty")
            unknown = [v for v in values if v not in allowed]
            if unknown:
                raise ConfigError(f"unknown {name}: {unknown}; expected a subset of {list(allowed)}")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError(f"seeds must be a nonempty list of nonnegative integers, got {self.seeds}")
        return

    def dataset(self, name: str) -> DatasetSpec:
        for spec in self.datasets:
            if spec.name == name:
                return spec
        raise ConfigError(f"unknown dataset {name!r}")

    @property
    def results_path(self) -> pathlib.Path:
        return self.output_dir / "results.jsonl"

    pass


@dataclasses.dataclass(frozen=True)
class RunSpec:
    """One point of the sweep product; ``key`` hashes its canonical config subtree."""

    dataset: str
    encoder: str
    method: str
    covariates: str
    seed: int
    key: str = ""

    @classmethod
    def build(cls, config: SweepConfig, dataset: str, encoder: str, method: str, covariates: str, seed: int) -> "RunSpec":
        subtree = {
            "dataset": config.dataset(dataset).to_json(),
            "encoder": encoder,
            "method": method,
            "covariates": covariates,
            "seed": seed,
            "train": config.train,
            "evaluation": config.evaluation.to_json(),
        }
        digest = hashlib.sha256(json.dumps(subtree, sort_keys=True).encode()).hexdigest()[:16]
        return cls(dataset, encoder, method, covariates, int(seed), digest)

    @property
    def axes(self) -> tuple:
        return (self.dataset, self.encoder, self.method, self.covariates, str(self.seed))

    @property
    def label(self) -> str:
        return "/".join(self.axes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    pass


def expand_sweep(config: SweepConfig) -> list:
    """Cartesian product of the sweep axes in configuration order.

    Machine-measure covariate sets are dropped, with a warning, on datasets that
    provide no machine columns.
    """
    specs = []
    for dataset in config.datasets:
        machine = dataset.has_machine_measures
        for encoder in config.encoders:
            for method in config.methods:
                for covariates in config.covariate_sets:
                    if covariates == "age+sex+machine" and not machine:
                        log.warning(f"dropping {dataset.name}/{encoder}/{method}/{covariates}: no machine measures")
                        continue
                    for seed in config.seeds:
                        specs.append(RunSpec.build(config, dataset.name, encoder, method, covariates, seed))
    if not specs:
        raise ConfigError("the sweep expands to no runs")
    log.info(f"sweep expands to {len(specs)} runs")
    return specs


def select_runs(specs: list, select: list = None, exclude: list = None) -> list:
    """Keep runs with any axis value matching a ``select`` pattern, then drop ``exclude`` matches."""

    def matches(spec: RunSpec, patterns: list) -> bool:
        return any(fnmatch.fnmatchcase(value, pattern) for pattern in patterns for value in spec.axes)

    chosen = [s for s in specs if matches(s, select)] if select else list(specs)
    if exclude:
        chosen = [s for s in chosen if not matches(s, exclude)]
    log.info(f"selected {len(chosen)} of {len(specs)} runs")
    return chosen


# ---------------------------------------------------------------------------- models


def covariate_columns(cohort: Cohort, covariate_set: str) -> list:
    if covariate_set == "none":
        return []
    if covariate_set == "age+sex":
        return ["age", "sex"]
    if covariate_set == "age+sex+machine":
        if not cohort.machine_measures:
            raise ConsistencyError("cohort has no machine-measure covariates")
        return ["age", "sex"] + cohort.machine_measures
    raise ConfigError(f"unknown covariate set {covariate_set!r}")


def with_covariates(cohort: Cohort, names: list) -> Cohort:
    missing = [n for n in names if n not in cohort.covariate_names]
    if missing:
        raise ConsistencyError(f"cohort lacks covariates {missing}")
    return dataclasses.replace(cohort, covariates=cohort.covariates[list(names)])


@dataclasses.dataclass
class TrainedModel:
    """A trained network plus everything needed to score a new cohort.

    Parameters
    ----------
    net : :class:`survbench.network.FusionNet`
    method : :class:`str`
    grid : :class:`survbench.classic.TimeGrid`
        Grid of the training run, reused on every evaluated cohort.
    normalizer : :class:`survbench.data.Normalizer`
        Waveform normalizer fitted on the training split.
    covariates : :class:`list`
        Covariate columns, in network order.
    baseline : :class:`survbench.training.DeepSurvBaseline` or None
    cox : :class:`survbench.classic.CoxModel` or None
        Classifier-Cox second stage.
    """

    net: FusionNet
    method: str
    grid: TimeGrid
    normalizer: Normalizer
    covariates: list
    baseline: DeepSurvBaseline = None
    cox: CoxModel = None

    def fit_second_stage(self, cohort: Cohort) -> "TrainedModel":
        """Breslow baseline on Train (DeepSurv) or Cox regression on the Val biomarker (classifiers)."""
        if self.method == "DeepSurv":
            self.baseline = DeepSurvBaseline.fit(self.net, cohort.select(Split.TRAIN))
        elif self.method in CLASSIFIERS:
            val = cohort.select(Split.VAL)
            biomarker = predict_curves(self.net, val, self.grid, self.method)
            self.cox = fit_classifier_cox(biomarker, val.times, val.events)
        return self

    def prepare(self, cohort: Cohort) -> Cohort:
        """Normalize waveforms with the training normalizer and keep the model's covariates."""
        return with_covariates(apply_normalizer(cohort, self.normalizer), self.covariates)

    def curves(self, cohort: Cohort) -> SurvivalCurve:
        predictions = predict_curves(self.net, cohort, self.grid, self.method, self.baseline)
        if self.method in CLASSIFIERS:
            return predict_survival(self.cox, predictions[:, None], self.grid)
        return predictions

    def save(self, path, config: TrainConfig, history: pd.DataFrame) -> None:
        best = history.loc[history["val_loss"].idxmin()]
        save_checkpoint(
            path,
            self.net,
            config,
            int(best["epoch"]),
            float(best["val_loss"]),
            method=self.method,
            grid=self.grid.to_json(),
            normalizer=self.normalizer.to_json(),
            covariates=list(self.covariates),
            baseline=self.baseline.to_json() if self.baseline else None,
            cox=self.cox.to_json() if self.cox else None,
        )
        return

    @classmethod
    def load(cls, path) -> "TrainedModel":
        net, header = load_checkpoint(path)
        return cls(
            net=net,
            method=header["method"],
            grid=TimeGrid(**header["grid"]),
            normalizer=Normalizer.from_json(header["normalizer"]),
            covariates=header["covariates"],
            baseline=DeepSurvBaseline.from_json(header["baseline"]) if header.get("baseline") else None,
            cox=CoxModel.from_json(header["cox"]) if header.get("cox") else None,
        )

    pass


def score_test_set(curves: SurvivalCurve, times, events, patient_ids, evaluation: Evaluation, seed: int) -> dict:
    """Every Test metric of one run; undefined values are kept as :class:`survbench.lib.Undefined`."""
    weighting = evaluation.weighting
    metrics = {"concordance": defined_or_undefined(concordance_td, curves, times, events, weighting=weighting)}
    for years in evaluation.horizons_years:
        tag = f"{years:g}y"
        metrics[f"concordance_{tag}"] = defined_or_undefined(
            concordance_censored_at, curves, times, events, years, weighting=weighting
        )
        roc = defined_or_undefined(horizon_roc_prc, curves, times, events, years)
        metrics[f"auroc_{tag}"], metrics[f"auprc_{tag}"] = roc if isinstance(roc, tuple) else (roc, roc)

    if evaluation.bootstrap_reps:

        def replicate(index):
            return defined_or_undefined(concordance_td, curves.subset(index), times[index], events[index], weighting=weighting)

        metrics["bootstrap_concordance"] = bootstrap_per_patient(replicate, patient_ids, evaluation.bootstrap_reps, seed)
    return metrics


def save_curves(path, curves: SurvivalCurve, cohort: Cohort, raw: Cohort) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        values=curves.values,
        t_max=curves.grid.t_max,
        times=cohort.times,
        events=cohort.events,
        patient_ids=cohort.patient_ids.astype(str),
        age=raw.covariates["age"].to_numpy(),
        sex=raw.covariates["sex"].to_numpy(),
    )
    return


def load_curves(path) -> tuple:
    """``(curves, times, events, patient_ids, age/sex frame)`` persisted by a run."""
    with np.load(path) as data:
        curves = SurvivalCurve(grid=TimeGrid(float(data["t_max"])), values=data["values"])
        covariates = pd.DataFrame({"age": data["age"], "sex": data["sex"]})
        return curves, data["times"], data["events"], data["patient_ids"], covariates


# ---------------------------------------------------------------------------- execution


def run_one(spec: RunSpec, config: SweepConfig) -> dict:
    """Train, evaluate and persist one run; returns its result record."""
    started = time.time()
    log.info(f"run {spec.key}: {spec.label}")
    raw = config.dataset(spec.dataset).split_cohort(spec.seed)
    names = covariate_columns(raw, spec.covariates)
    cohort = with_covariates(fit_apply_normalizer(raw), names)
    val = cohort.select(Split.VAL)
    grid = TimeGrid.from_times(val.times)

    train_config = TrainConfig.from_json(config.train, seed=spec.seed, method=spec.method)
    net = FusionNet(spec.encoder, len(names), head_dim(spec.method), seed=spec.seed)
    _, history = train(net, cohort, grid, train_config)
    model = TrainedModel(net, spec.method, grid, cohort.normalizer, names).fit_second_stage(cohort)

    raw_test = raw.select(Split.TEST)
    test = model.prepare(raw_test)
    curves = model.curves(test)
    metrics = score_test_set(curves, test.times, test.events, test.patient_ids, config.evaluation, spec.seed)

    artifacts = {
        "model": f"models/{spec.key}.ckpt",
        "curves": f"curves/{spec.key}.npz",
        "history": f"history/{spec.key}.csv",
    }
    out = config.output_dir
    model.save(out / artifacts["model"], train_config, history)
    save_curves(out / artifacts["curves"], curves, test, raw_test)
    (out / artifacts["history"]).parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(out / artifacts["history"], index=False)

    best = history.loc[history["val_loss"].idxmin()]
    log.success(f"run {spec.key} done: concordance {metrics['concordance']}")
    return {
        **spec.to_json(),
        "status": RunState.DONE.value,
        "metrics": metrics,
        "n_params": net.parameter_count,
        "epochs": int(history["epoch"].max()),
        "best_epoch": int(best["epoch"]),
        "best_val_loss": float(best["val_loss"]),
        "grid_t_max": grid.t_max,
        "artifacts": artifacts,
        "wall_time_s": time.time() - started,
    }


def _run_worker(job: tuple) -> dict:
    spec, raw_config = job
    started = time.time()
    try:
        return run_one(spec, SweepConfig(raw_config))
    except Exception as err:
        log.error(f"run {spec.key} ({spec.label}) failed: {type(err).__name__}: {err}")
        return {
            **spec.to_json(),
            "status": RunState.FAILED.value,
            "error": f"{type(err).__name__}: {err}",
            "diagnostics": getattr(err, "diagnostics", {}),
            "wall_time_s": time.time() - started,
        }


def execute(specs: list, config: SweepConfig, parallel: int = 1) -> dict:
    """Run every spec not already done and append one result line per run.

    Workers only compute; this process is the single writer of the ledger.

    Returns
    -------
    :class:`dict`
        Counts of ``done``, ``failed`` and ``skipped`` runs.
    """
    if parallel < 1:
        raise ConfigError(f"parallelism must be at least 1, got {parallel}")
    ledger = RunLedger(config.results_path)
    pending = [s for s in specs if ledger.state(s.key) is not RunState.DONE]
    counts = {"done": 0, "failed": 0, "skipped": len(specs) - len(pending)}
    if counts["skipped"]:
        log.info(f"{counts['skipped']} runs already done; skipping them")

    jobs = [(s, config.config) for s in pending]
    try:
        if parallel > 1 and len(jobs) > 1:
            with Pool(min(parallel, len(jobs))) as pool:
                for record in pool.imap_unordered(_run_worker, jobs):
                    ledger.append(record)
                    counts[record["status"]] += 1
        else:
            for record in map(_run_worker, jobs):
                ledger.append(record)
                counts[record["status"]] += 1
    finally:
        clear_cohorts()

    log.success(f"sweep finished: {counts['done']} done, {counts['failed']} failed, {counts['skipped']} skipped")
    return counts


# ---------------------------------------------------------------------------- cross evaluation


def _cross_cells(config: SweepConfig, records: list) -> list:
    cells = []
    for record in records:
        model = TrainedModel.load(config.output_dir / record["artifacts"]["model"])
        for target in config.datasets:
            try:
                test = model.prepare(target.split_cohort(record["seed"]).select(Split.TEST))
                metrics = score_test_set(
                    model.curves(test), test.times, test.events, test.patient_ids, config.evaluation, record["seed"]
                )
            except SurvbenchError as err:
                log.warning(f"{record['key']} on {target.name}: {err}")
                metrics = {"concordance": Undefined(str(err))}
            cells.append(
                {
                    "key": record["key"],
                    "train_dataset": record["dataset"],
                    "test_dataset": target.name,
                    "encoder": record["encoder"],
                    "method": record["method"],
                    "covariates": record["covariates"],
                    "seed": record["seed"],
                    "metrics": metrics,
                }
            )
    return cells


def cross_evaluate(config: SweepConfig, select: list = None, exclude: list = None) -> pd.DataFrame:
    """Score every finished run on the Test split of every configured dataset.

    Each model keeps its own normalizer and time grid. Cells whose covariates do
    not fit the model are undefined. Writes ``cross_eval.jsonl`` (one line per
    model and dataset) and ``cross_eval.csv`` (median/quartiles across seeds).
    """
    ledger = RunLedger(config.results_path)
    records = ledger.done
    if select or exclude:
        keep = {s.key for s in select_runs([RunSpec(**_spec_fields(r)) for r in records], select, exclude)}
        records = [r for r in records if r["key"] in keep]
    if not records:
        raise ConfigError("no finished runs to cross-evaluate")

    try:
        cells = _cross_cells(config, records)
    finally:
        clear_cohorts()

    config.output_dir.mkdir(parents=True, exist_ok=True)
    cross_ledger = config.output_dir / "cross_eval.jsonl"
    cross_ledger.unlink(missing_ok=True)
    writer = RunLedger(cross_ledger)
    for cell in cells:
        writer.append({**cell, "key": f"{cell['key']}:{cell['test_dataset']}"})

    rows = []
    columns = ["train_dataset", "test_dataset", "encoder", "method", "covariates"]
    frame = pd.DataFrame([{c: cell[c] for c in columns} | {"concordance": cell["metrics"]["concordance"]} for cell in cells])
    for group, part in frame.groupby(columns, sort=True):
        summary = summarize(list(part["concordance"]))
        rows.append(dict(zip(columns, group)) | {k: summary[k] for k in ("median", "q25", "q75", "n", "n_undefined")})
    table = pd.DataFrame(rows)
    table.map(lambda v: f"undefined: {v.reason}" if isinstance(v, Undefined) else v).to_csv(
        config.output_dir / "cross_eval.csv", index=False
    )
    log.success(f"cross-evaluation table with {len(table)} cells written to {config.output_dir / 'cross_eval.csv'}")
    return table


def _spec_fields(record: dict) -> dict:
    return {f.name: record[f.name] for f in dataclasses.fields(RunSpec)}


def recompute_metrics(record: dict, config: SweepConfig) -> dict:
    """Score the Test curves persisted by a finished run again."""
    curves, times, events, patient_ids, _ = load_curves(config.output_dir / record["artifacts"]["curves"])
    return score_test_set(curves, times, events, patient_ids, config.evaluation, record["seed"])
