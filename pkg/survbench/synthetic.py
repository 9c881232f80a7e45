"""Synthetic cohorts with a known log-risk and Weibull event times.

Every record gets covariates ``age ~ Normal(age_mean, age_std)`` (clamped at 0) and
``sex ~ Bernoulli(0.5)``, a latent ``z ~ Normal(0, 1)`` and true log-risk
``r = beta . x + gamma * z``. Event times follow a Weibull proportional-hazards model,
``T = scale * (-ln U * exp(-r)) ** (1 / shape)``, censored by ``C ~ Uniform(0, censor_max)``.

The waveform is a frozen P-QRS-T beat tiled at 1 Hz over 10 s at 400 Hz. Its QRS
complex is scaled by ``1 - 0.3 * sigmoid(z)``, so higher risk means lower amplitude.
"""

import dataclasses
import math
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger as log
from scipy.special import expit

from survbench.data import (
    MIN_TIME_TO_EVENT,
    N_CHANNELS,
    TARGET_LENGTH,
    TARGET_RATE,
    TARGET_SECONDS,
    Cohort,
    preprocess_waveform,
    write_cohort,
)
from survbench.lib import ConfigError, ShapeError, make_rng
from survbench.metrics import concordance_td

# Fixed per-lead gains applied to the shared beat; signs flip the complex on some leads.
CHANNEL_GAINS = np.array([1.0, 1.2, 0.4, -0.8, 0.5, 0.9, 0.3, 0.6, 1.1, 1.3, 1.0, 0.8])

# (center s, width s, height mV) of the Gaussian bumps composing one beat.
P_WAVE = ((0.20, 0.025, 0.15),)
QRS_COMPLEX = ((0.33, 0.008, -0.10), (0.36, 0.010, 1.0), (0.39, 0.010, -0.25))
T_WAVE = ((0.60, 0.040, 0.30),)

MACHINE_MEASURES = ("qrs_duration", "qt_interval")


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic cohort.

    Parameters
    ----------
    n : :class:`int`
        Number of records (ECGs).
    beta : :class:`dict`
        Log-hazard-ratio per covariate name.
    gamma : :class:`float`
        Log-hazard-ratio of the waveform latent.
    weibull_shape, weibull_scale : :class:`float`
        Weibull ``k`` and ``lambda`` (days).
    censor_max : :class:`float`
        Upper bound (days) of uniform administrative censoring.
    seed : :class:`int`
        Generator seed.
    ecgs_per_patient : :class:`int`
        Records sharing one patient id (and its age/sex).
    machine_measures : :class:`bool`
        Add ``qrs_duration``/``qt_interval`` covariates.
    age_mean, age_std, noise_std, amplitude_shift : :class:`float`
        Distribution knobs; ``amplitude_shift`` shrinks every QRS complex for
        shifted cohorts.
    """

    n: int = 1000
    beta: dict = dataclasses.field(default_factory=dict)
    gamma: float = 0.0
    weibull_shape: float = 1.0
    weibull_scale: float = 1000.0
    censor_max: float = 3650.0
    seed: int = 0
    ecgs_per_patient: int = 1
    machine_measures: bool = False
    age_mean: float = 50.0
    age_std: float = 15.0
    noise_std: float = 0.05
    amplitude_shift: float = 0.0

    def __post_init__(self):
        if self.n < 0:
            raise ConfigError(f"n must be nonnegative, got {self.n}")
        if not self.weibull_shape > 0:
            raise ConfigError(f"weibull_shape must be positive, got {self.weibull_shape}")
        if not self.weibull_scale > 0:
            raise ConfigError(f"weibull_scale must be positive, got {self.weibull_scale}")
        if not self.censor_max > 0:
            raise ConfigError(f"censor_max must be positive, got {self.censor_max}")
        if self.ecgs_per_patient < 1:
            raise ConfigError(f"ecgs_per_patient must be at least 1, got {self.ecgs_per_patient}")
        known = ("age", "sex") + (MACHINE_MEASURES if self.machine_measures else ())
        unknown = sorted(set(self.beta) - set(known))
        if unknown:
            raise ConfigError(f"beta names unknown covariates {unknown}; known: {list(known)}")
        object.__setattr__(self, "beta", {k: float(v) for k, v in self.beta.items()})

    @property
    def covariate_names(self) -> list:
        return ["age", "sex"] + (list(MACHINE_MEASURES) if self.machine_measures else [])

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - fields)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {unknown}")
        return cls(**data)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    pass


def _bumps(t: np.ndarray, bumps) -> np.ndarray:
    out = np.zeros_like(t)
    for center, width, height in bumps:
        out += height * np.exp(-0.5 * ((t - center) / width) ** 2)
    return out


def beat_template(rate: float = TARGET_RATE) -> tuple:
    """One second of (P + T waves, QRS complex) sampled at ``rate``."""
    t = np.arange(int(rate)) / rate
    return _bumps(t, P_WAVE) + _bumps(t, T_WAVE), _bumps(t, QRS_COMPLEX)


def simulate_outcomes(spec: SyntheticSpec) -> pd.DataFrame:
    """Covariates, latent, true log-risk and censored outcomes, without waveforms."""
    rng = make_rng(spec.seed)
    n = spec.n
    n_patients = math.ceil(n / spec.ecgs_per_patient)
    owner = np.arange(n) // spec.ecgs_per_patient

    age = np.maximum(rng.normal(spec.age_mean, spec.age_std, n_patients), 0.0)[owner]
    sex = (rng.random(n_patients) < 0.5).astype(np.float64)[owner]
    latent = rng.normal(0.0, 1.0, n)
    uniform = 1.0 - rng.random(n)
    censor_time = rng.uniform(0.0, spec.censor_max, n)

    frame = pd.DataFrame(
        {
            "patient_id": [f"P{p:07d}" for p in owner],
            "ecg_id": [f"E{i:08d}" for i in range(n)],
            "age": age,
            "sex": sex,
        }
    )
    if spec.machine_measures:
        frame["qrs_duration"] = 95.0 + 10.0 * latent + rng.normal(0.0, 5.0, n)
        frame["qt_interval"] = 400.0 + rng.normal(0.0, 25.0, n)

    log_risk = spec.gamma * latent
    for name, coef in spec.beta.items():
        log_risk = log_risk + coef * frame[name].to_numpy()
    event_time = spec.weibull_scale * (-np.log(uniform) * np.exp(-log_risk)) ** (1.0 / spec.weibull_shape)

    frame["latent"] = latent
    frame["log_risk"] = log_risk
    frame["event_time"] = event_time
    frame["censor_time"] = censor_time
    frame["time_to_event"] = np.maximum(np.minimum(event_time, censor_time), MIN_TIME_TO_EVENT)
    frame["event"] = event_time <= censor_time
    return frame


def synthetic_waveform(latent: float, spec: SyntheticSpec, index: int) -> np.ndarray:
    """Raw ``4000 x 12`` waveform at 400 Hz for one record."""
    rest, qrs = beat_template()
    beats = int(TARGET_SECONDS)
    amplitude = (1.0 - 0.3 * expit(latent)) * (1.0 - spec.amplitude_shift)
    trace = np.tile(rest, beats) + amplitude * np.tile(qrs, beats)
    noise = make_rng(spec.seed, 1, index).normal(0.0, spec.noise_std, (trace.size, N_CHANNELS))
    return trace[:, None] * CHANNEL_GAINS[None, :] + noise


def generate(spec: SyntheticSpec) -> tuple:
    """Generate a cohort and its true log-risk.

    Returns
    -------
    cohort, true_log_risk : :class:`survbench.data.Cohort`, :class:`numpy.ndarray`
    """
    log.info(f"generating synthetic cohort n={spec.n} seed={spec.seed}")
    frame = simulate_outcomes(spec)
    waveforms = np.empty((spec.n, TARGET_LENGTH, N_CHANNELS), dtype=np.float32)
    for i, z in enumerate(frame["latent"].to_numpy()):
        waveforms[i] = preprocess_waveform(synthetic_waveform(z, spec, i), TARGET_RATE)

    cohort = Cohort(
        patient_ids=frame["patient_id"].to_numpy(dtype=object),
        ecg_ids=frame["ecg_id"].to_numpy(dtype=object),
        waveforms=waveforms,
        covariates=frame[spec.covariate_names],
        times=frame["time_to_event"].to_numpy(),
        events=frame["event"].to_numpy(),
    )
    log.debug(f"synthetic cohort: {cohort.events.mean():.1%} events")
    return cohort, frame["log_risk"].to_numpy()


def generate_files(spec: SyntheticSpec, out_prefix) -> tuple:
    """Generate a cohort and write ``<prefix>.csv`` + ``<prefix>.ecgb``."""
    cohort, true_log_risk = generate(spec)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    metadata = out_prefix.with_name(out_prefix.name + ".csv")
    waveforms = out_prefix.with_name(out_prefix.name + ".ecgb")
    write_cohort(cohort, metadata, waveforms)
    log.success(f"wrote {metadata} and {waveforms}")
    return metadata, waveforms


def oracle_concordance(cohort: Cohort, true_log_risk, weighting: str = "km") -> float:
    """Concordance of the generator's constant-in-time log-risk: the ceiling for trained models."""
    true_log_risk = np.asarray(true_log_risk, dtype=np.float64)
    if true_log_risk.shape != (len(cohort),):
        raise ShapeError(f"need {len(cohort)} log-risks, got {true_log_risk.shape}")
    return concordance_td(true_log_risk, cohort.times, cohort.events, weighting=weighting)
