import json
import sys
from contextlib import contextmanager

import typer
from typing_extensions import Annotated

from loguru import logger as log

from survbench.ledger import RunLedger, RunState
from survbench.lib import ConfigError, SurvbenchError, parse_selection
from survbench.report import build_report, config_label, plot_run_survival
from survbench.sweep import RunSpec, SweepConfig, cross_evaluate, execute, expand_sweep, select_runs
from survbench.synthetic import SyntheticSpec, generate_files

app = typer.Typer(add_completion=False, help="Benchmark survival models on ECG cohorts.")

PARTIAL_FAILURE_EXIT = 3

ConfigOption = Annotated[str, typer.Option("--config", "-c", help="Path to the JSON configuration file.")]
OutOption = Annotated[str, typer.Option("--out", "-o", help="Output directory; overrides `output_dir` of the config.")]
SelectOption = Annotated[
    str,
    typer.Option("--select", "-s", help="Run selection, e.g. `WaveStats,-Cla-*`. Entries are matched against every run axis."),
]


@contextmanager
def _handled():
    try:
        yield
    except SurvbenchError as err:
        err.show()
        raise typer.Exit(err.exit_code)


@app.callback()
def main(
    loglevel: Annotated[
        str,
        typer.Option("--log", help="Provide logging level. Example --log debug")
    ] = "info",
) -> None:
    """
    Configure logging for every command.

    Parameters
    ----------
    loglevel : :class:`str`
        Provide logging level. Example `--log` debug, [Default='info']
    """
    logger_format = "| <level>{level: <8}</level> | - <level>{message}</level>"

    log.remove()
    log.add(sys.stderr, format=logger_format, level=loglevel.upper())
    return


@app.command(help="Generate a synthetic cohort as a metadata CSV and an ECGB waveform file.")
def gen(
    config: ConfigOption,
    out: Annotated[str, typer.Option("--out", "-o", help="Output prefix; writes <prefix>.csv and <prefix>.ecgb.")] = "synthetic",
    seed: Annotated[int, typer.Option(help="Overrides the generator seed of the config.", show_default=False)] = None,
) -> None:
    with _handled():
        try:
            with open(config) as stream:
                data = json.load(stream)
        except ValueError as err:
            raise ConfigError(f"{config} is not valid JSON: {err}") from err
        if seed is not None:
            data["seed"] = seed
        generate_files(SyntheticSpec.from_json(data), out)
    return


def _finish(counts: dict) -> None:
    if counts["failed"]:
        log.error(f"{counts['failed']} runs failed; see the `error` field of their result lines")
        raise typer.Exit(PARTIAL_FAILURE_EXIT)
    return


@app.command(help="Train and evaluate one run of the sweep.")
def train(
    config: ConfigOption,
    dataset: Annotated[str, typer.Option(help="Dataset name; defaults to the first configured dataset.", show_default=False)] = None,
    encoder: Annotated[str, typer.Option(help="Encoder: TabularZero, WaveStats or TinyConv.")] = "WaveStats",
    method: Annotated[str, typer.Option(help="Survival or classifier method, e.g. DeepSurv or Cla-5.")] = "DeepSurv",
    covariates: Annotated[str, typer.Option(help="Covariate set: none, age+sex or age+sex+machine.")] = "age+sex",
    seed: Annotated[int, typer.Option(help="Run seed.")] = 0,
    out: OutOption = None,
) -> None:
    with _handled():
        sweep_config = SweepConfig.from_file(
            config, output_dir=out, encoders=[encoder], methods=[method], covariate_sets=[covariates], seeds=[seed]
        )
        name = dataset or sweep_config.datasets[0].name
        spec = RunSpec.build(sweep_config, name, encoder, method, covariates, seed)
        counts = execute([spec], sweep_config)
        record = RunLedger(sweep_config.results_path).get(spec.key)
        if record and record["status"] == RunState.DONE.value:
            log.success(f"{spec.label}: concordance {record['metrics']['concordance']} (key {spec.key})")
    _finish(counts)
    return


@app.command(help="Expand the configured sweep and run everything not yet done.")
def sweep(
    config: ConfigOption,
    out: OutOption = None,
    parallel: Annotated[int, typer.Option("--parallel", "-j", help="Number of worker processes.")] = 1,
    select: SelectOption = None,
) -> None:
    with _handled():
        sweep_config = SweepConfig.from_file(config, output_dir=out)
        chosen, excluded = parse_selection(select)
        specs = select_runs(expand_sweep(sweep_config), chosen, excluded)
        counts = execute(specs, sweep_config, parallel)
    _finish(counts)
    return


@app.command("cross-eval", help="Score every finished run on the Test split of every configured dataset.")
def cross_eval(
    config: ConfigOption,
    out: OutOption = None,
    select: SelectOption = None,
) -> None:
    with _handled():
        sweep_config = SweepConfig.from_file(config, output_dir=out)
        chosen, excluded = parse_selection(select)
        cross_evaluate(sweep_config, chosen, excluded)
    return


@app.command(help="Write summary, comparison, correlation and subgroup tables plus figures.")
def report(config: ConfigOption, out: OutOption = None) -> None:
    with _handled():
        build_report(SweepConfig.from_file(config, output_dir=out))
    return


@app.command("km-plot", help="Plot Kaplan-Meier against the predicted population survival of one run.")
def km_plot(
    config: ConfigOption,
    key: Annotated[str, typer.Option(help="Result key of a finished run.")],
    out: OutOption = None,
    figure: Annotated[str, typer.Option(help="SVG path; defaults to <output_dir>/km_<key>.svg.", show_default=False)] = None,
) -> None:
    with _handled():
        sweep_config = SweepConfig.from_file(config, output_dir=out)
        record = RunLedger(sweep_config.results_path).get(key)
        if record is None or record["status"] != RunState.DONE.value:
            raise ConfigError(f"no finished run with key {key!r}")
        path = figure or sweep_config.output_dir / f"km_{key}.svg"
        table = plot_run_survival(sweep_config, record, path)
        table.to_csv(str(path).removesuffix(".svg") + ".csv", index=False)
        log.success(f"{config_label(record)}: survival overlay written to {path}")
    return


if __name__ == "__main__":
    app()
