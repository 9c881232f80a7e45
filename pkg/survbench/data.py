"""Cohort ingestion, waveform preprocessing, patient-level splitting and labels.

All times are stored in days. Waveforms are stored as one ``(n, 4096, 12)`` array
whose dtype is preserved through normalization (``float32`` when read from ECGB).
"""

import math
import struct
import dataclasses
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger as log

from survbench.lib import (
    YEAR_DAYS,
    ConfigError,
    ConsistencyError,
    FormatError,
    ShapeError,
    StateError,
    UnsupportedInputError,
    make_rng,
)

N_CHANNELS = 12
TARGET_RATE = 400.0
TARGET_SECONDS = 10.0
TARGET_LENGTH = 4096
MIN_TIME_TO_EVENT = 0.5
STD_FLOOR = 1e-8

METADATA_COLUMNS = ("patient_id", "ecg_id", "time_to_event_days", "event", "age", "sex")
BASE_COVARIATES = ("age", "sex")

ECGB_MAGIC = b"ECGB"
ECGB_VERSION = 1
ECGB_ID_BYTES = 16
_ECGB_HEADER = struct.Struct("<4sBI")
_ECGB_RECORD = struct.Struct("<16sII")

_CHUNK = 256


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclasses.dataclass(frozen=True, eq=False)
class EcgRecord:
    """One observation: a preprocessed waveform with its covariates and outcome."""

    patient_id: str
    ecg_id: str
    waveform: np.ndarray
    covariates: dict
    time_to_event: float
    event: bool


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """How to split a cohort into Train/Val/Test by patient.

    Parameters
    ----------
    fractions : :class:`tuple`
        (train, val, test) fractions summing to 1.
    seed : :class:`int`
        Seed of the Train/Val shuffle (and of Test unless ``test_seed`` is given).
    fixed_test : :class:`tuple` or None
        Patient ids pinned to Test; only Train/Val are reshuffled per seed.
    test_seed : :class:`int` or None
        Seed of the Test allocation when no patients are pinned, keeping Test fixed
        across ``seed`` values.
    """

    fractions: tuple = (0.64, 0.16, 0.20)
    seed: int = 0
    fixed_test: tuple = None
    test_seed: int = None

    def __post_init__(self):
        fractions = tuple(float(f) for f in self.fractions)
        if len(fractions) != 3:
            raise ConfigError(f"split fractions need three values, got {len(fractions)}")
        if any(f < 0 or not math.isfinite(f) for f in fractions):
            raise ConfigError(f"split fractions must be nonnegative, got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-12:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")
        object.__setattr__(self, "fractions", fractions)
        if self.fixed_test is not None:
            object.__setattr__(self, "fixed_test", tuple(str(p) for p in self.fixed_test))


@dataclasses.dataclass(frozen=True)
class Normalizer:
    """Per-channel z-score statistics fitted on a Train split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(-1), STD_FLOOR)
        if mean.shape != (N_CHANNELS,) or std.shape != (N_CHANNELS,):
            raise ShapeError(f"normalizer needs {N_CHANNELS} channels, got {mean.shape} / {std.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def transform(self, waveforms: np.ndarray) -> np.ndarray:
        out = np.empty(waveforms.shape, dtype=waveforms.dtype)
        for start in range(0, len(waveforms), _CHUNK):
            block = waveforms[start : start + _CHUNK].astype(np.float64)
            out[start : start + _CHUNK] = (block - self.mean) / self.std
        return out

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Normalizer":
        return cls(mean=np.array(data["mean"]), std=np.array(data["std"]))


@dataclasses.dataclass(frozen=True, eq=False)
class Cohort:
    """A set of records stored column-wise, plus split assignment and normalizer.

    Parameters
    ----------
    patient_ids, ecg_ids : :class:`numpy.ndarray`
        Opaque string identifiers, one per record.
    waveforms : :class:`numpy.ndarray`
        ``(n, 4096, 12)`` preprocessed waveforms.
    covariates : :class:`pandas.DataFrame`
        Ordered covariate columns (``age``, ``sex``, optional machine measures).
    times : :class:`numpy.ndarray`
        Time-to-event in days, clamped to at least 0.5.
    events : :class:`numpy.ndarray`
        Boolean event indicators.
    split : :class:`dict` or None
        ``ecg_id`` -> :class:`Split`.
    normalizer : :class:`Normalizer` or None
        Train-fitted normalizer already applied to ``waveforms``.
    excluded : :class:`dict`
        Rows dropped at ingestion, reason -> count.
    """

    patient_ids: np.ndarray
    ecg_ids: np.ndarray
    waveforms: np.ndarray
    covariates: pd.DataFrame
    times: np.ndarray
    events: np.ndarray
    split: dict = None
    normalizer: Normalizer = None
    excluded: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ecg_ids)
        object.__setattr__(self, "patient_ids", np.asarray(self.patient_ids, dtype=object))
        object.__setattr__(self, "ecg_ids", np.asarray(self.ecg_ids, dtype=object))
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "events", np.asarray(self.events, dtype=bool))
        if not isinstance(self.covariates, pd.DataFrame):
            object.__setattr__(self, "covariates", pd.DataFrame(self.covariates))
        object.__setattr__(self, "covariates", self.covariates.reset_index(drop=True).astype(np.float64))
        waveforms = np.asarray(self.waveforms)
        if n and waveforms.shape[1:] != (TARGET_LENGTH, N_CHANNELS):
            raise ShapeError(f"waveforms must be (n, {TARGET_LENGTH}, {N_CHANNELS}), got {waveforms.shape}")
        if not n:
            waveforms = waveforms.reshape(0, TARGET_LENGTH, N_CHANNELS)
        object.__setattr__(self, "waveforms", waveforms)
        lengths = {len(self.patient_ids), len(waveforms), len(self.covariates), len(self.times), len(self.events)}
        if lengths != {n}:
            raise ShapeError(f"cohort columns have different lengths: {sorted(lengths)} vs {n}")
        for array in (self.patient_ids, self.ecg_ids, self.waveforms, self.times, self.events):
            array.flags.writeable = False

    def __len__(self) -> int:
        return len(self.ecg_ids)

    @property
    def covariate_names(self) -> list:
        return list(self.covariates.columns)

    @property
    def machine_measures(self) -> list:
        return [c for c in self.covariates.columns if c not in BASE_COVARIATES]

    def record(self, i: int) -> EcgRecord:
        return EcgRecord(
            patient_id=self.patient_ids[i],
            ecg_id=self.ecg_ids[i],
            waveform=self.waveforms[i],
            covariates=dict(self.covariates.iloc[i]),
            time_to_event=float(self.times[i]),
            event=bool(self.events[i]),
        )

    @property
    def records(self) -> list:
        return [self.record(i) for i in range(len(self))]

    def split_labels(self) -> np.ndarray:
        if self.split is None:
            raise StateError("cohort has no split assignment")
        return np.array([Split(self.split[e]).value for e in self.ecg_ids], dtype=str)

    def mask(self, split: Split) -> np.ndarray:
        return self.split_labels() == Split(split).value

    def subset(self, index) -> "Cohort":
        """Records selected by a boolean mask or an index array, in that order."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return dataclasses.replace(
            self,
            patient_ids=self.patient_ids[index],
            ecg_ids=self.ecg_ids[index],
            waveforms=self.waveforms[index],
            covariates=self.covariates.iloc[index],
            times=self.times[index],
            events=self.events[index],
        )

    def select(self, split: Split) -> "Cohort":
        return self.subset(self.mask(split))

    def with_split(self, assignment: dict) -> "Cohort":
        missing = [e for e in self.ecg_ids if e not in assignment]
        if missing:
            raise ConsistencyError(f"{len(missing)} records have no split, e.g. {missing[:3]}")
        return dataclasses.replace(self, split=dict(assignment))

    pass


# ---------------------------------------------------------------------------- ECGB


def write_ecgb(path, ecg_ids, waveforms) -> None:
    """Write waveforms (each ``samples x channels``) into an ECGB v1 container."""
    ecg_ids = list(ecg_ids)
    with open(path, "wb") as f:
        f.write(_ECGB_HEADER.pack(ECGB_MAGIC, ECGB_VERSION, len(ecg_ids)))
        for ecg_id, waveform in zip(ecg_ids, waveforms):
            raw_id = str(ecg_id).encode("utf-8")
            if len(raw_id) > ECGB_ID_BYTES:
                raise FormatError(f"ecg_id `{ecg_id}` longer than {ECGB_ID_BYTES} bytes")
            waveform = np.asarray(waveform)
            if waveform.ndim != 2:
                raise ShapeError(f"waveform for `{ecg_id}` must be 2-D, got {waveform.shape}")
            samples, channels = waveform.shape
            f.write(_ECGB_RECORD.pack(raw_id, samples, channels))
            f.write(np.ascontiguousarray(waveform.T, dtype="<f4").tobytes())
    return


def read_ecgb(path) -> dict:
    """Read an ECGB v1 container into ``{ecg_id: samples x channels float32 array}``."""
    data = Path(path).read_bytes()
    if len(data) < _ECGB_HEADER.size:
        raise FormatError(f"{path}: truncated ECGB header")
    magic, version, count = _ECGB_HEADER.unpack_from(data, 0)
    if magic != ECGB_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {magic!r}")
    if version != ECGB_VERSION:
        raise FormatError(f"{path}: unsupported ECGB version {version}")

    offset = _ECGB_HEADER.size
    waveforms = {}
    for i in range(count):
        if offset + _ECGB_RECORD.size > len(data):
            raise FormatError(f"{path}: truncated record header #{i}")
        raw_id, samples, channels = _ECGB_RECORD.unpack_from(data, offset)
        offset += _ECGB_RECORD.size
        nbytes = 4 * samples * channels
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated samples in record #{i}")
        ecg_id = raw_id.rstrip(b"\0").decode("utf-8")
        if ecg_id in waveforms:
            raise ConsistencyError(f"{path}: duplicate ecg_id `{ecg_id}`")
        block = np.frombuffer(data, dtype="<f4", count=samples * channels, offset=offset)
        waveforms[ecg_id] = np.ascontiguousarray(block.reshape(channels, samples).T, dtype=np.float32)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after {count} records")
    return waveforms


# ---------------------------------------------------------------------------- preprocessing


def preprocess_waveform(raw: np.ndarray, source_rate: float) -> np.ndarray:
    """Resample to 400 Hz by linear interpolation and center-pad to ``4096 x 12``.

    Parameters
    ----------
    raw : :class:`numpy.ndarray`
        ``samples x 12`` signal of at most 10 seconds.
    source_rate : :class:`float`
        Sampling rate of ``raw`` in Hz.

    Returns
    -------
    :class:`numpy.ndarray`
        ``float32`` array of shape ``(4096, 12)``. A 10 s signal gets 48 leading and
        48 trailing zeros; an odd padding remainder goes to the trailing side.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != N_CHANNELS:
        raise ShapeError(f"waveform must be samples x {N_CHANNELS}, got {raw.shape}")
    if not source_rate > 0:
        raise ConfigError(f"source rate must be positive, got {source_rate}")

    n_in = raw.shape[0]
    duration = n_in / source_rate
    if duration > TARGET_SECONDS + 1e-9:
        raise UnsupportedInputError(f"waveform lasts {duration:.3f} s, longer than {TARGET_SECONDS:g} s")

    if source_rate == TARGET_RATE:
        resampled = raw
    else:
        n_out = int(round(duration * TARGET_RATE))
        t_in = np.arange(n_in) / source_rate
        t_out = np.arange(n_out) / TARGET_RATE
        resampled = np.empty((n_out, N_CHANNELS))
        for c in range(N_CHANNELS):
            resampled[:, c] = np.interp(t_out, t_in, raw[:, c])

    n_out = resampled.shape[0]
    lead = (TARGET_LENGTH - n_out) // 2
    out = np.zeros((TARGET_LENGTH, N_CHANNELS), dtype=np.float32)
    out[lead : lead + n_out] = resampled
    return out


# ---------------------------------------------------------------------------- CSV


def _parse_float_column(frame: pd.DataFrame, column: str, path) -> np.ndarray:
    values = np.full(len(frame), np.nan)
    for i, cell in enumerate(frame[column]):
        cell = cell.strip()
        if not cell:
            continue
        try:
            values[i] = float(cell)
        except ValueError:
            raise FormatError(f"{path}: non-numeric `{column}` value {cell!r} on data row {i + 1}")
    return values


def _read_metadata(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path}: metadata file has no header")
    header = tuple(frame.columns[: len(METADATA_COLUMNS)])
    if header != METADATA_COLUMNS:
        raise FormatError(f"{path}: header must start with {','.join(METADATA_COLUMNS)}, got {','.join(frame.columns)}")
    return frame


def load_cohort(metadata_path, waveform_path, source_rate: float = TARGET_RATE) -> Cohort:
    """Load a metadata CSV and its ECGB waveform file into a :class:`Cohort`.

    Rows with a missing time-to-event, event, covariate or waveform are excluded and
    counted per reason in :attr:`Cohort.excluded`. Waveforms already shaped
    ``4096 x 12`` are taken as preprocessed; others are passed through
    :func:`preprocess_waveform` at ``source_rate``.
    """
    log.info(f"loading cohort from {metadata_path} and {waveform_path}")
    frame = _read_metadata(metadata_path)
    waveforms = read_ecgb(waveform_path)

    ids = list(frame["ecg_id"])
    if len(set(ids)) != len(ids):
        raise ConsistencyError(f"{metadata_path}: duplicate ecg_id values")
    orphans = sorted(set(waveforms) - set(ids))
    if orphans:
        raise ConsistencyError(
            f"{waveform_path}: {len(orphans)} waveforms have no metadata row, e.g. {orphans[:3]}"
        )

    times = _parse_float_column(frame, "time_to_event_days", metadata_path)
    events = _parse_float_column(frame, "event", metadata_path)
    bad_events = ~np.isnan(events) & ~np.isin(events, (0.0, 1.0))
    if bad_events.any():
        raise FormatError(f"{metadata_path}: event must be 0 or 1")
    covariate_names = list(frame.columns[len(METADATA_COLUMNS) - 2 :])
    covariates = pd.DataFrame({c: _parse_float_column(frame, c, metadata_path) for c in covariate_names})

    excluded = {"time_to_event": 0, "event": 0, "covariates": 0, "waveform": 0}
    keep = []
    processed = []
    for i, ecg_id in enumerate(ids):
        if not np.isfinite(times[i]) or times[i] < 0:
            excluded["time_to_event"] += 1
            continue
        if np.isnan(events[i]):
            excluded["event"] += 1
            continue
        if not np.isfinite(covariates.iloc[i].to_numpy()).all():
            excluded["covariates"] += 1
            continue
        raw = waveforms.get(ecg_id)
        if raw is None or raw.shape[0] == 0 or not np.isfinite(raw).all():
            excluded["waveform"] += 1
            continue
        if raw.shape == (TARGET_LENGTH, N_CHANNELS):
            processed.append(raw.astype(np.float32, copy=False))
        else:
            processed.append(preprocess_waveform(raw, source_rate))
        keep.append(i)

    for reason, count in excluded.items():
        if count:
            log.warning(f"excluded {count} rows with missing {reason}")

    keep = np.asarray(keep, dtype=int)
    cohort = Cohort(
        patient_ids=frame["patient_id"].to_numpy(dtype=object)[keep],
        ecg_ids=frame["ecg_id"].to_numpy(dtype=object)[keep],
        waveforms=np.stack(processed) if processed else np.zeros((0, TARGET_LENGTH, N_CHANNELS), np.float32),
        covariates=covariates.iloc[keep],
        times=np.maximum(times[keep], MIN_TIME_TO_EVENT),
        events=events[keep] == 1.0,
        excluded={k: v for k, v in excluded.items() if v},
    )
    log.success(f"loaded {len(cohort)} records ({sum(excluded.values())} excluded)")
    return cohort


def write_cohort(cohort: Cohort, metadata_path, waveform_path) -> None:
    """Write a cohort as the metadata CSV + ECGB pair read by :func:`load_cohort`."""
    frame = pd.DataFrame(
        {
            "patient_id": cohort.patient_ids,
            "ecg_id": cohort.ecg_ids,
            "time_to_event_days": [repr(float(t)) for t in cohort.times],
            "event": [str(int(e)) for e in cohort.events],
        }
    )
    for name in cohort.covariate_names:
        frame[name] = [repr(float(v)) for v in cohort.covariates[name]]
    frame.to_csv(metadata_path, index=False)
    write_ecgb(waveform_path, cohort.ecg_ids, cohort.waveforms)
    log.debug(f"wrote {len(cohort)} records to {metadata_path} / {waveform_path}")
    return


# ---------------------------------------------------------------------------- splitting


def _count(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 1e-9))


def split_by_patient(cohort: Cohort, spec: SplitSpec) -> dict:
    """Assign every record to Train/Val/Test so that a patient's records share a split.

    Patients are sorted, shuffled with a seeded PCG64 generator and allocated by
    cumulative fractions with floor rounding; the last split takes the remainder.

    Returns
    -------
    :class:`dict`
        ``ecg_id`` -> :class:`Split`.
    """
    patients = sorted(set(cohort.patient_ids))
    n = len(patients)
    f_train, f_val, f_test = spec.fractions
    by_patient = {}

    if spec.fixed_test is not None:
        pinned = set(spec.fixed_test)
        unknown = sorted(pinned - set(patients))
        if unknown:
            raise ConfigError(f"fixed test patients not in cohort: {unknown[:5]}")
        free = [p for p in patients if p not in pinned]
        if n and abs(len(pinned) / n - f_test) > 0.05:
            log.warning(f"pinned test set holds {len(pinned) / n:.1%} of patients, fractions ask for {f_test:.1%}")
        test = sorted(pinned)
    elif spec.test_seed is not None:
        order = make_rng(spec.test_seed).permutation(n)
        cut = _count(f_train + f_val, n)
        free = sorted(patients[i] for i in order[:cut])
        test = [patients[i] for i in order[cut:]]
    else:
        free, test = patients, None

    order = make_rng(spec.seed).permutation(len(free))
    shuffled = [free[i] for i in order]
    if test is None:
        n_train = _count(f_train, n)
        n_val = _count(f_train + f_val, n) - n_train
        test = shuffled[n_train + n_val :]
    else:
        share = f_train / (f_train + f_val) if f_train + f_val > 0 else 0.0
        n_train = _count(share, len(shuffled))
        n_val = len(shuffled) - n_train

    for p in shuffled[:n_train]:
        by_patient[p] = Split.TRAIN
    for p in shuffled[n_train : n_train + n_val]:
        by_patient[p] = Split.VAL
    for p in test:
        by_patient[p] = Split.TEST

    log.debug(
        f"split {n} patients: {n_train} train / {n_val} val / {len(test)} test (seed {spec.seed})"
    )
    return {e: by_patient[p] for e, p in zip(cohort.ecg_ids, cohort.patient_ids)}


# ---------------------------------------------------------------------------- normalization


def fit_normalizer(cohort: Cohort) -> Normalizer:
    """Per-channel mean/std over every Train waveform sample."""
    train = np.flatnonzero(cohort.mask(Split.TRAIN))
    if not len(train):
        raise StateError("cannot fit normalizer on an empty Train split")

    count = len(train) * TARGET_LENGTH
    total = np.zeros(N_CHANNELS)
    for start in range(0, len(train), _CHUNK):
        block = cohort.waveforms[train[start : start + _CHUNK]].astype(np.float64)
        total += block.sum(axis=(0, 1))
    mean = total / count

    squares = np.zeros(N_CHANNELS)
    for start in range(0, len(train), _CHUNK):
        block = cohort.waveforms[train[start : start + _CHUNK]].astype(np.float64)
        squares += ((block - mean) ** 2).sum(axis=(0, 1))
    return Normalizer(mean=mean, std=np.sqrt(squares / count))


def apply_normalizer(cohort: Cohort, normalizer: Normalizer) -> Cohort:
    """Return a cohort whose waveforms are z-scored with ``normalizer``."""
    return dataclasses.replace(cohort, waveforms=normalizer.transform(cohort.waveforms), normalizer=normalizer)


def fit_apply_normalizer(cohort: Cohort) -> Cohort:
    """Fit the normalizer on Train and transform every split with it."""
    normalizer = fit_normalizer(cohort)
    log.debug(f"normalizer mean {np.round(normalizer.mean, 4)} std {np.round(normalizer.std, 4)}")
    return apply_normalizer(cohort, normalizer)


# ---------------------------------------------------------------------------- labels


def horizon_labels(times, events, horizon: float) -> np.ndarray:
    """1 where an event is observed by ``horizon`` (days), else 0, censored included."""
    if not horizon > 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    return (events & (times <= horizon)).astype(np.int64)


def horizon_label(time_to_event: float, event: bool, horizon: float) -> int:
    return int(horizon_labels([time_to_event], [event], horizon)[0])


def event_rate_table(cohort: Cohort, horizons) -> pd.DataFrame:
    """Percentage of records with an observed event by each horizon (years).

    The final ``max`` row counts every observed event.
    """
    horizons = [float(h) for h in horizons]
    if any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ConfigError(f"horizons must be ascending, got {horizons}")
    columns = ["horizon", "horizon_days", "events", "records", "percent"]
    if not len(cohort):
        return pd.DataFrame(columns=columns)

    rows = []
    for h in horizons:
        labels = horizon_labels(cohort.times, cohort.events, h * YEAR_DAYS)
        rows.append([f"{h:g}", h * YEAR_DAYS, int(labels.sum()), len(cohort), 100.0 * labels.mean()])
    rows.append(["max", float(cohort.times.max()), int(cohort.events.sum()), len(cohort), 100.0 * cohort.events.mean()])
    return pd.DataFrame(rows, columns=columns)
