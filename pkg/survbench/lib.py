"""Common objects used throughout the project."""

import re

import numpy as np
from loguru import logger as log

YEAR_DAYS = 365.25
HORIZONS_YEARS = (1, 2, 5, 10)


class SurvbenchError(Exception):
    """Base of every error raised on purpose by ``survbench``.

    Error messages should be logged through :meth:`show` before the program exits.
    """

    exit_code = 1

    def __init__(self, message: str = "", **diagnostics) -> None:
        super(SurvbenchError, self).__init__(message)
        self.diagnostics = diagnostics

    def show(self, **_):
        log.critical(f"{type(self).__name__}: {self}")
        for key, value in self.diagnostics.items():
            log.critical(f"  {key}: {value}")

    pass


class ConfigError(SurvbenchError):
    """Invalid configuration or argument value."""

    exit_code = 2


class FormatError(SurvbenchError):
    """Input file does not follow its schema."""


class ConsistencyError(SurvbenchError):
    """Two inputs that must agree do not."""


class ShapeError(SurvbenchError):
    """Array dimensions do not match what the operation expects."""


class UnsupportedInputError(SurvbenchError):
    """Input is well formed but outside what the pipeline supports."""


class StateError(SurvbenchError):
    """Operation called on an object that is not ready for it."""


class FitError(SurvbenchError):
    """A statistical model could not be fitted."""


class MonotoneLikelihoodError(FitError):
    """Partial likelihood keeps increasing; coefficients diverge."""


class PreconditionError(SurvbenchError):
    """Input violates a precondition of a loss or sampler."""


class TrainingError(SurvbenchError):
    """Training aborted."""


class UndefinedMetricError(SurvbenchError):
    """Metric has no defined value on the given inputs."""


class UndefinedTestError(SurvbenchError):
    """Statistical test has no defined value on the given inputs."""


class BootstrapError(SurvbenchError):
    """Metric failed inside a bootstrap replicate."""

    def __init__(self, rep: int, cause: Exception) -> None:
        super(BootstrapError, self).__init__(f"replicate {rep}: {cause}", rep=rep)
        self.rep = rep
        self.cause = cause


class Undefined(object):
    """Typed placeholder for a value that could not be computed.

    Parameters
    ----------
    reason : :class:`str`
        Why the value is undefined.
    """

    __slots__ = ("reason",)

    def __init__(self, reason: str) -> None:
        self.reason = reason

    def __repr__(self) -> str:
        return f"Undefined({self.reason!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Undefined) and other.reason == self.reason

    def __hash__(self) -> int:
        return hash(("undefined", self.reason))

    def to_json(self) -> dict:
        return {"undefined": self.reason}

    pass


def is_defined(value) -> bool:
    return not isinstance(value, Undefined)


def defined_or_undefined(func, *args, **kwargs):
    """Call ``func`` and turn an undefined-metric/test error into :class:`Undefined`."""
    try:
        return func(*args, **kwargs)
    except (UndefinedMetricError, UndefinedTestError) as err:
        return Undefined(str(err))


def to_jsonable(value):
    """Recursively convert numpy scalars/arrays and :class:`Undefined` into JSON types."""
    if isinstance(value, Undefined):
        return value.to_json()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def from_jsonable(value):
    """Inverse of :func:`to_jsonable` for :class:`Undefined` markers."""
    if isinstance(value, dict):
        if set(value) == {"undefined"}:
            return Undefined(value["undefined"])
        return {k: from_jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [from_jsonable(v) for v in value]
    return value


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Seeded PCG64 generator; ``stream`` derives independent sub-streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))))


def parse_selection(selection: str) -> tuple:
    """
    Parse a CLI selection string into patterns to select and patterns to exclude.

    Returns (:class:`None`, :class:`None`), if the input is None.

    Parameters
    ----------
    selection : :class:`str`
        Input CLI-argument, e.g. ``"WaveStats,-Cla-*"``.

    Returns
    -------
    select, exclude : :class:`list`, :class:`list`
    """
    if not selection:
        return (None, None)

    select = []
    exclude = []
    for x in re.split(r"\s|,|\|", selection):
        if not x:
            continue
        elif x[0] == "-":
            exclude.append(x[1:])
        elif x[0] == "+":
            select.append(x[1:])
        else:
            select.append(x)

    log.info(f"select: {select}")
    log.info(f"exclude: {exclude}")
    return (select, exclude)
