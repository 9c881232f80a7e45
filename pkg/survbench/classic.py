"""Classical survival estimators: Kaplan-Meier, Breslow/Nelson-Aalen and Cox regression."""

import dataclasses
import json

import numpy as np
from loguru import logger as log

from survbench.lib import ConfigError, FitError, MonotoneLikelihoodError, ShapeError

GRID_POINTS = 100
COX_TOLERANCE = 1e-9
COX_MAX_ITER = 100
COX_MAX_HALVINGS = 30
COX_DIVERGENCE = 50.0
COX_INFINITE_RATIO = COX_TOLERANCE**0.5


def _as_survival_data(times, events) -> tuple:
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    if times.shape != events.shape:
        raise ShapeError(f"times and events differ in length: {times.shape} vs {events.shape}")
    return times, events


@dataclasses.dataclass(frozen=True)
class KaplanMeier:
    """Product-limit estimate at the distinct event times.

    Parameters
    ----------
    times : :class:`numpy.ndarray`
        Distinct event times, ascending.
    survival : :class:`numpy.ndarray`
        ``S(t)`` right after each event time.
    at_risk, events : :class:`numpy.ndarray`
        Number at risk and number of events at each event time.
    """

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous ``S(t)``; 1 before the first event time."""
        index = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate(([1.0], self.survival))[index]

    def left_limit(self, t) -> np.ndarray:
        """``S(t-)``: survival just before ``t``."""
        index = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left")
        return np.concatenate(([1.0], self.survival))[index]

    pass


def kaplan_meier(times, events) -> KaplanMeier:
    """Product-limit estimator ``S(t) = prod_{t_i <= t} (1 - d_i / n_i)``."""
    times, events = _as_survival_data(times, events)
    if not len(times):
        raise FitError("Kaplan-Meier needs at least one observation")
    if not (times > 0).all():
        raise ConfigError("Kaplan-Meier times must be positive")

    distinct, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events, minlength=len(distinct))
    leaving = np.bincount(inverse, minlength=len(distinct))
    at_risk = len(times) - np.concatenate(([0], np.cumsum(leaving)[:-1]))

    observed = deaths > 0
    factors = 1.0 - deaths[observed] / at_risk[observed]
    return KaplanMeier(
        times=distinct[observed],
        survival=np.cumprod(factors),
        at_risk=at_risk[observed].astype(np.int64),
        events=deaths[observed].astype(np.int64),
    )


def censoring_km(times, events) -> KaplanMeier:
    """Kaplan-Meier of the censoring distribution ``G(t)`` (event flags inverted)."""
    times, events = _as_survival_data(times, events)
    return kaplan_meier(times, ~events)


@dataclasses.dataclass(frozen=True)
class StepHazard:
    """Right-continuous cumulative hazard step function, 0 before the first knot."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t) -> np.ndarray:
        index = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate(([0.0], self.values))[index]

    def to_json(self) -> dict:
        return {"times": self.times.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "StepHazard":
        return cls(times=np.array(data["times"], dtype=np.float64), values=np.array(data["values"], dtype=np.float64))

    pass


def breslow_baseline(log_risk, times, events) -> StepHazard:
    """Breslow estimator ``H0(t) = sum_{t_i <= t} d_i / sum_{j in R(t_i)} exp(r_j)``."""
    times, events = _as_survival_data(times, events)
    log_risk = np.asarray(log_risk, dtype=np.float64).reshape(-1)
    if log_risk.shape != times.shape:
        raise ShapeError(f"log-risk and times differ in length: {log_risk.shape} vs {times.shape}")
    if not events.any():
        return StepHazard(times=np.zeros(0), values=np.zeros(0))

    shift = log_risk.max()
    order = np.argsort(times, kind="stable")
    sorted_times = times[order]
    weights = np.exp(log_risk[order] - shift)
    # Sum of weights over {j : T_j >= t} for every sorted position.
    tail = np.cumsum(weights[::-1])[::-1]

    distinct = np.unique(times[events])
    deaths = np.array([np.count_nonzero(times[events] == t) for t in distinct], dtype=np.float64)
    denominators = tail[np.searchsorted(sorted_times, distinct, side="left")]
    increments = deaths / denominators * np.exp(-shift)
    return StepHazard(times=distinct, values=np.cumsum(increments))


def nelson_aalen(times, events) -> StepHazard:
    """Nelson-Aalen cumulative hazard (Breslow with all log-risks 0)."""
    times, _ = _as_survival_data(times, events)
    return breslow_baseline(np.zeros_like(times), times, events)


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """100 uniformly spaced time points from 0 to ``t_max`` (days)."""

    t_max: float

    def __post_init__(self):
        if not (np.isfinite(self.t_max) and self.t_max > 0):
            raise ConfigError(f"time grid needs a positive maximum, got {self.t_max}")
        object.__setattr__(self, "t_max", float(self.t_max))

    @classmethod
    def from_times(cls, times) -> "TimeGrid":
        return cls(t_max=float(np.max(times)))

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, GRID_POINTS)

    @property
    def step(self) -> float:
        return self.t_max / (GRID_POINTS - 1)

    def nearest_index(self, t) -> np.ndarray:
        """Index of the temporally closest grid point; exact midpoints go to the earlier point."""
        t = np.asarray(t, dtype=np.float64)
        points = self.points
        upper = np.clip(np.searchsorted(points, t, side="left"), 1, GRID_POINTS - 1)
        lower = upper - 1
        closer_upper = (points[upper] - t) < (t - points[lower])
        return np.where(closer_upper, upper, lower)

    def bin_index(self, t) -> np.ndarray:
        """Left-closed bin ``k = min(floor(t / step), 99)``."""
        t = np.asarray(t, dtype=np.float64)
        return np.clip(np.floor(t / self.step), 0, GRID_POINTS - 1).astype(np.int64)

    def to_json(self) -> dict:
        return {"t_max": self.t_max}

    pass


@dataclasses.dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Survival probabilities of many records sampled on one :class:`TimeGrid`.

    ``values`` has shape ``(n_records, 100)``; every row lies in [0, 1] and is
    non-increasing along the grid.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != GRID_POINTS:
            raise ShapeError(f"survival values must be (n, {GRID_POINTS}), got {values.shape}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def at(self, t) -> np.ndarray:
        """Per-record survival at the grid point closest to ``t``."""
        return self.values[:, self.grid.nearest_index(t)]

    def subset(self, index) -> "SurvivalCurve":
        return SurvivalCurve(grid=self.grid, values=self.values[index])

    def check(self) -> bool:
        """True when every row is within [0, 1] and non-increasing."""
        values = self.values
        return bool(
            np.isfinite(values).all()
            and (values >= 0).all()
            and (values <= 1).all()
            and (np.diff(values, axis=1) <= 0).all()
        )

    pass


@dataclasses.dataclass(frozen=True)
class CoxModel:
    """Fitted proportional-hazards model.

    Parameters
    ----------
    beta : :class:`numpy.ndarray`
        Log-hazard-ratio per covariate.
    baseline : :class:`StepHazard`
        Breslow baseline cumulative hazard ``H0``.
    names : :class:`tuple`
        Covariate names, in column order.
    iterations : :class:`int`
        Newton-Raphson iterations used.
    log_likelihood : :class:`float`
        Final Breslow log partial likelihood.
    """

    beta: np.ndarray
    baseline: StepHazard
    names: tuple = ()
    iterations: int = 0
    log_likelihood: float = 0.0

    def log_risk(self, covariates) -> np.ndarray:
        covariates = np.asarray(covariates, dtype=np.float64)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        if covariates.shape[1] != len(self.beta):
            raise ShapeError(f"model has {len(self.beta)} covariates, input has {covariates.shape[1]}")
        return covariates @ self.beta

    def to_json(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "baseline": self.baseline.to_json(),
            "names": list(self.names),
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, data: dict) -> "CoxModel":
        return cls(
            beta=np.array(data["beta"], dtype=np.float64),
            baseline=StepHazard.from_json(data["baseline"]),
            names=tuple(data.get("names", ())),
            iterations=int(data.get("iterations", 0)),
            log_likelihood=float(data.get("log_likelihood", 0.0)),
        )

    pass


class _PartialLikelihood(object):
    """Breslow-ties log partial likelihood with gradient and Hessian.

    Risk-set sums are reverse cumulative sums over time-sorted rows, read at the
    first row of each tied block so ties share one risk set.
    """

    def __init__(self, x: np.ndarray, times: np.ndarray, events: np.ndarray) -> None:
        order = np.argsort(times, kind="stable")
        self.x = x[order]
        sorted_times = times[order]
        self.events = events[order]
        self.start = np.searchsorted(sorted_times, sorted_times[self.events], side="left")
        return

    def __call__(self, beta: np.ndarray, derivatives: bool = True) -> tuple:
        eta = self.x @ beta
        shift = eta.max()
        w = np.exp(eta - shift)
        s0 = np.cumsum(w[::-1])[::-1][self.start]
        loglik = float(eta[self.events].sum() - (np.log(s0) + shift).sum())
        if not derivatives:
            return loglik, None, None

        wx = w[:, None] * self.x
        s1 = np.cumsum(wx[::-1], axis=0)[::-1][self.start]
        s2 = np.cumsum((wx[:, :, None] * self.x[:, None, :])[::-1], axis=0)[::-1][self.start]
        mean = s1 / s0[:, None]
        gradient = self.x[self.events].sum(axis=0) - mean.sum(axis=0)
        hessian = -(s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]).sum(axis=0)
        return loglik, gradient, hessian

    pass


def _newton_step(gradient: np.ndarray, hessian: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(-hessian, gradient)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(-hessian, gradient, rcond=None)[0]


def fit_cox(covariates, times, events, names=None) -> CoxModel:
    """Fit a Cox model by Newton-Raphson with step-halving (Breslow ties).

    Constant columns get ``beta = 0``. The other columns are standardized for the
    iterations and ``beta`` is mapped back to the original scale. Iterations stop
    when the log partial likelihood changes by less than 1e-9 or after 100 steps.

    Raises
    ------
    :class:`survbench.lib.FitError`
        No events.
    :class:`survbench.lib.MonotoneLikelihoodError`
        Coefficients diverge (|beta| > 50 on the standardized scale), the
        likelihood flattens while a Newton step is still pending or the
        iterations do not converge.
    """
    times, events = _as_survival_data(times, events)
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != len(times):
        raise ShapeError(f"covariates have {x.shape[0]} rows, times have {len(times)}")
    if not np.isfinite(x).all():
        raise FitError("covariates must be finite")
    if not events.any():
        raise FitError("Cox regression needs at least one event")
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(x.shape[1]))

    center = x.mean(axis=0)
    scale = x.std(axis=0)
    active = scale > 0
    if not active.all():
        log.debug(f"constant covariates get beta = 0: {[n for n, a in zip(names, active) if not a]}")
    z = (x[:, active] - center[active]) / scale[active]

    likelihood = _PartialLikelihood(z, times, events)
    beta_z = np.zeros(z.shape[1])
    loglik, gradient, hessian = likelihood(beta_z)
    iterations = 0
    converged = z.shape[1] == 0

    while not converged and iterations < COX_MAX_ITER:
        iterations += 1
        step = _newton_step(gradient, hessian)

        for _ in range(COX_MAX_HALVINGS):
            candidate = beta_z + step
            new_loglik = likelihood(candidate, derivatives=False)[0]
            if np.isfinite(new_loglik) and new_loglik >= loglik - COX_TOLERANCE:
                break
            step = step / 2.0
        else:
            candidate, new_loglik = beta_z, loglik

        change = abs(new_loglik - loglik)
        beta_z = candidate
        loglik, gradient, hessian = likelihood(beta_z)
        if np.abs(beta_z).max() > COX_DIVERGENCE:
            raise MonotoneLikelihoodError(
                "Cox coefficients diverge; the partial likelihood looks monotone",
                iterations=iterations,
                beta_standardized=beta_z.tolist(),
                log_likelihood=loglik,
            )
        converged = change < COX_TOLERANCE
        log.trace(f"cox iteration {iterations}: loglik {loglik:.10f} change {change:.2e}")

    if not converged:
        raise MonotoneLikelihoodError(
            f"Cox fit did not converge in {COX_MAX_ITER} iterations",
            iterations=iterations,
            beta_standardized=beta_z.tolist(),
            log_likelihood=loglik,
        )
    # The likelihood can flatten out while a coefficient still heads to infinity.
    pending = np.abs(_newton_step(gradient, hessian)) if z.shape[1] else np.zeros(0)
    if ((pending > COX_TOLERANCE) & (pending > COX_INFINITE_RATIO * np.abs(beta_z))).any():
        raise MonotoneLikelihoodError(
            "Cox log partial likelihood converged before the coefficients; they look infinite",
            iterations=iterations,
            beta_standardized=beta_z.tolist(),
            pending_step=pending.tolist(),
        )

    beta = np.zeros(x.shape[1])
    beta[active] = beta_z / scale[active]
    baseline = breslow_baseline(x @ beta, times, events)
    return CoxModel(beta=beta, baseline=baseline, names=names, iterations=iterations, log_likelihood=loglik)


def predict_survival(model: CoxModel, covariates, grid: TimeGrid) -> SurvivalCurve:
    """``S(t) = exp(-H0(t) * exp(beta . x))`` on the grid points."""
    risk = np.exp(model.log_risk(covariates))
    hazard = model.baseline(grid.points)
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.exp(-np.outer(risk, hazard))
    values = np.where(hazard[None, :] == 0.0, 1.0, values)
    return SurvivalCurve(grid=grid, values=values)


def fit_classifier_cox(biomarker, val_times, val_events, covariates=None, covariate_names=()) -> CoxModel:
    """Second stage of Classifier-Cox: a Cox regression on the classifier output.

    The fit uses the full (time-to-event, event) validation labels. Extra
    ``covariates`` may be added next to the biomarker.
    """
    biomarker = np.asarray(biomarker, dtype=np.float64).reshape(-1, 1)
    if not np.isfinite(biomarker).all():
        raise FitError("biomarker must be finite")
    names = ("biomarker",)
    x = biomarker
    if covariates is not None:
        extra = np.asarray(covariates, dtype=np.float64)
        extra = extra[:, None] if extra.ndim == 1 else extra
        x = np.hstack([biomarker, extra])
        names = names + tuple(covariate_names or (f"x{i}" for i in range(extra.shape[1])))
    model = fit_cox(x, val_times, val_events, names=names)
    log.debug(f"classifier-cox beta {model.beta.tolist()} after {model.iterations} iterations")
    return model
