"""Optimizer, schedule, training loop, curve prediction and checkpoints."""

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger as log
from scipy.special import expit

from survbench.classic import StepHazard, SurvivalCurve, TimeGrid, breslow_baseline
from survbench.data import Cohort, Split, horizon_labels
from survbench.lib import (
    YEAR_DAYS,
    ConfigError,
    FormatError,
    PreconditionError,
    StateError,
    TrainingError,
    make_rng,
)
from survbench.losses import (
    DISCRETE_KINDS,
    ensure_positive_event,
    loss_bce,
    loss_cox_batch,
    loss_discrete,
    survival_from_logits,
)
from survbench.network import FusionNet, encoder_inputs

DEEP_SURVIVAL = ("DeepSurv",) + DISCRETE_KINDS
CLASSIFIERS = {"Cla-1": 1, "Cla-2": 2, "Cla-5": 5, "Cla-10": 10}
METHODS = DEEP_SURVIVAL + tuple(CLASSIFIERS)

CHECKPOINT_MAGIC = b"SBCK"
_CHECKPOINT_LENGTH = struct.Struct("<I")


def head_dim(method: str, bins: int = 100) -> int:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    return bins if method in DISCRETE_KINDS else 1


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimization settings of one training run.

    Parameters
    ----------
    lr : :class:`float`
        Initial learning rate.
    plateau_patience, plateau_factor, min_lr
        Learning-rate schedule: multiply by ``plateau_factor`` after
        ``plateau_patience`` epochs without validation improvement, never below ``min_lr``.
    early_stop_patience : :class:`int`
        Epochs without validation improvement before training stops.
    max_epochs, batch_size : :class:`int`
    weight_decay : :class:`float`
        Decoupled weight decay.
    seed : :class:`int`
        Seeds initialization, shuffling and event swaps.
    method : :class:`str`
        One of :data:`METHODS`.
    deephit_alpha, deephit_sigma : :class:`float`
        DeepHit ranking weight and scale.
    """

    lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    min_lr: float = 1e-8
    early_stop_patience: int = 20
    max_epochs: int = 200
    batch_size: int = 512
    weight_decay: float = 1e-2
    seed: int = 0
    method: str = "DeepSurv"
    deephit_alpha: float = 0.2
    deephit_sigma: float = 0.1

    def __post_init__(self):
        positive = ("lr", "plateau_patience", "plateau_factor", "min_lr", "early_stop_patience", "max_epochs", "batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.deephit_alpha < 0 or not self.deephit_sigma > 0:
            raise ConfigError("weight_decay and deephit_alpha must be nonnegative, deephit_sigma positive")
        if not self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must be below 1, got {self.plateau_factor}")
        if self.early_stop_patience <= self.plateau_patience:
            raise ConfigError("early_stop_patience must exceed plateau_patience")
        head_dim(self.method)

    @property
    def is_classifier(self) -> bool:
        return self.method in CLASSIFIERS

    @property
    def horizon_years(self) -> float:
        return CLASSIFIERS.get(self.method)

    @classmethod
    def from_json(cls, data: dict, **overrides) -> "TrainConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - fields)
        if unknown:
            raise ConfigError(f"unknown train settings: {unknown}")
        return cls(**{**data, **overrides})

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    pass


class AdamW(object):
    """Adam with decoupled weight decay, updating a flat parameter vector in place."""

    def __init__(self, size: int, lr: float = 1e-3, betas: tuple = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2) -> None:
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        beta1, beta2 = self.betas
        self.t += 1
        params *= 1.0 - self.lr * self.weight_decay
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad**2
        m_hat = self.m / (1.0 - beta1**self.t)
        v_hat = self.v / (1.0 - beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return

    pass


class ReduceLROnPlateau(object):
    """Scale the optimizer's learning rate after ``patience`` epochs without strict improvement."""

    def __init__(self, optimizer: AdamW, factor: float = 0.1, patience: int = 10, min_lr: float = 1e-8) -> None:
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> bool:
        """Record one validation loss; True when the learning rate was reduced."""
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return False
        self.bad_epochs = 0
        new_lr = max(self.optimizer.lr * self.factor, self.min_lr)
        reduced = new_lr < self.optimizer.lr
        self.optimizer.lr = new_lr
        return reduced

    pass


# ---------------------------------------------------------------------------- targets and losses


@dataclasses.dataclass(frozen=True)
class Targets:
    """Per-record training targets for one split."""

    times: np.ndarray
    events: np.ndarray
    bins: np.ndarray
    labels: np.ndarray

    @classmethod
    def build(cls, cohort: Cohort, grid: TimeGrid, config: TrainConfig) -> "Targets":
        labels = np.zeros(len(cohort))
        if config.is_classifier:
            labels = horizon_labels(cohort.times, cohort.events, config.horizon_years * YEAR_DAYS).astype(np.float64)
        return cls(times=cohort.times, events=cohort.events, bins=grid.bin_index(cohort.times), labels=labels)

    pass


def batch_loss(outputs: np.ndarray, targets: Targets, index: np.ndarray, config: TrainConfig) -> tuple:
    """(loss, dL/d(outputs), clamped tails) of one batch."""
    if config.method == "DeepSurv":
        loss, grad = loss_cox_batch(outputs[:, 0], targets.times[index], targets.events[index])
        return loss, grad[:, None], 0
    if config.is_classifier:
        loss, grad = loss_bce(outputs[:, 0], targets.labels[index])
        return loss, grad[:, None], 0
    loss, grad, diagnostics = loss_discrete(
        config.method,
        outputs,
        targets.bins[index],
        targets.events[index],
        targets.times[index],
        alpha=config.deephit_alpha,
        sigma=config.deephit_sigma,
    )
    return loss, grad, diagnostics["clamped"]


def evaluate_loss(net: FusionNet, params, features, covariates, targets: Targets, config: TrainConfig) -> float:
    """Loss of a whole split; DeepSurv uses every record as one risk set, other methods average fixed-order batches."""
    n = len(targets.times)
    if config.method == "DeepSurv":
        if not targets.events.any():
            raise StateError("DeepSurv loss needs at least one event in the evaluated split")
        outputs = net.predict(features, covariates, params)
        return batch_loss(outputs, targets, np.arange(n), config)[0]

    total = 0.0
    for start in range(0, n, config.batch_size):
        index = np.arange(start, min(start + config.batch_size, n))
        outputs = net.forward(features[index], covariates[index], params)[0]
        total += batch_loss(outputs, targets, index, config)[0] * len(index)
    return total / n


# ---------------------------------------------------------------------------- training loop


def split_inputs(net: FusionNet, cohort: Cohort, split: Split) -> tuple:
    part = cohort.select(split)
    if not len(part):
        raise StateError(f"{split.value} split is empty")
    return part, encoder_inputs(net.encoder_kind, part.waveforms), part.covariates.to_numpy()


def train(net: FusionNet, cohort: Cohort, grid: TimeGrid, config: TrainConfig) -> tuple:
    """Fit ``net`` on the Train split, selecting the epoch with minimum Val loss.

    Mini-batches of ``config.batch_size`` are reshuffled every epoch. DeepSurv
    batches without an event get their last record swapped for a random training
    event. The network is left holding the best parameters.

    Returns
    -------
    best_params, history : :class:`numpy.ndarray`, :class:`pandas.DataFrame`
        History has one row per epoch (row 0 is the initialization) with
        ``epoch``, ``train_loss``, ``val_loss`` and ``lr``.

    Raises
    ------
    :class:`survbench.lib.StateError`
        Empty Train or Val split.
    :class:`survbench.lib.PreconditionError`
        DeepSurv training set without events.
    :class:`survbench.lib.TrainingError`
        A non-finite loss.
    """
    if net.head_dim != head_dim(config.method, grid.points.size):
        raise ConfigError(f"{net.describe()} does not fit method {config.method}")
    train_part, train_x, train_c = split_inputs(net, cohort, Split.TRAIN)
    val_part, val_x, val_c = split_inputs(net, cohort, Split.VAL)
    if config.method == "DeepSurv" and not train_part.events.any():
        raise PreconditionError("DeepSurv training set contains no event")
    train_y = Targets.build(train_part, grid, config)
    val_y = Targets.build(val_part, grid, config)

    net.calibrate(train_x, train_c)
    params = net.params
    optimizer = AdamW(params.size, lr=config.lr, weight_decay=config.weight_decay)
    scheduler = ReduceLROnPlateau(optimizer, config.plateau_factor, config.plateau_patience, config.min_lr)
    rng = make_rng(config.seed, 11)

    def check(loss: float, epoch: int, batch: int) -> float:
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss}", epoch=epoch, batch=batch, lr=optimizer.lr, method=config.method)
        return loss

    best_loss = check(evaluate_loss(net, params, val_x, val_c, val_y, config), 0, -1)
    best_params = params.copy()
    history = [[0, check(evaluate_loss(net, params, train_x, train_c, train_y, config), 0, -1), best_loss, optimizer.lr]]
    stale = 0
    log.info(f"training {config.method} {net.describe()} on {len(train_part)} records, validating on {len(val_part)}")

    n = len(train_part)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        running, clamped = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            index = order[start : start + config.batch_size]
            if config.method == "DeepSurv":
                index = ensure_positive_event(index, train_y.events, rng)
            outputs, cache = net.forward(train_x[index], train_c[index], params)
            loss, d_out, n_clamped = batch_loss(outputs, train_y, index, config)
            running += check(loss, epoch, b) * len(index)
            clamped += n_clamped
            optimizer.step(params, net.backward(cache, d_out, params))
        if clamped:
            log.warning(f"epoch {epoch}: {clamped} censored tails clamped at 1e-12")

        val_loss = check(evaluate_loss(net, params, val_x, val_c, val_y, config), epoch, -1)
        lr = optimizer.lr
        history.append([epoch, running / n, val_loss, lr])
        log.debug(f"epoch {epoch}: train {running / n:.6f} val {val_loss:.6f} lr {lr:.1e}")

        if val_loss < best_loss:
            best_loss, best_params, stale = val_loss, params.copy(), 0
        else:
            stale += 1
        if scheduler.step(val_loss):
            log.debug(f"epoch {epoch}: learning rate reduced to {optimizer.lr:.1e}")
        if stale >= config.early_stop_patience:
            log.info(f"early stop at epoch {epoch}; best val loss {best_loss:.6f}")
            break

    net.params[...] = best_params
    frame = pd.DataFrame(history, columns=["epoch", "train_loss", "val_loss", "lr"])
    return best_params, frame


# ---------------------------------------------------------------------------- prediction


@dataclasses.dataclass(frozen=True)
class DeepSurvBaseline:
    """Breslow baseline fitted on the training log-risks of a DeepSurv net."""

    hazard: StepHazard

    @classmethod
    def fit(cls, net: FusionNet, cohort: Cohort) -> "DeepSurvBaseline":
        log_risk = net.predict(encoder_inputs(net.encoder_kind, cohort.waveforms), cohort.covariates.to_numpy())[:, 0]
        return cls(hazard=breslow_baseline(log_risk, cohort.times, cohort.events))

    def curves(self, log_risk: np.ndarray, grid: TimeGrid) -> SurvivalCurve:
        hazard = self.hazard(grid.points)
        with np.errstate(over="ignore", invalid="ignore"):
            values = np.exp(-np.outer(np.exp(log_risk), hazard))
        return SurvivalCurve(grid=grid, values=np.where(hazard[None, :] == 0.0, 1.0, values))

    def to_json(self) -> dict:
        return self.hazard.to_json()

    @classmethod
    def from_json(cls, data: dict) -> "DeepSurvBaseline":
        return cls(hazard=StepHazard.from_json(data))

    pass


def predict_curves(net: FusionNet, cohort: Cohort, grid: TimeGrid, method: str, baseline: DeepSurvBaseline = None):
    """Survival curves of ``cohort`` on ``grid``, or the classifier probability per record.

    DeepSurv needs the :class:`DeepSurvBaseline` fitted on its training data.
    """
    if net.head_dim != head_dim(method, grid.points.size):
        raise ConfigError(f"{net.describe()} cannot produce {method} predictions")
    outputs = net.predict(encoder_inputs(net.encoder_kind, cohort.waveforms), cohort.covariates.to_numpy())
    if method in CLASSIFIERS:
        return expit(outputs[:, 0])
    if method == "DeepSurv":
        if baseline is None:
            raise StateError("DeepSurv curves need a Breslow baseline from the training data")
        return baseline.curves(outputs[:, 0], grid)
    return SurvivalCurve(grid=grid, values=survival_from_logits(method, outputs))


# ---------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: FusionNet, config: TrainConfig, epoch: int, val_loss: float, **extra) -> None:
    """JSON header (architecture, config, epoch, val loss, input scaling, extras) + little-endian f64 parameters."""
    header = {
        "architecture": net.architecture(),
        "config": config.to_json(),
        "epoch": int(epoch),
        "val_loss": float(val_loss),
        "buffers": net.buffers(),
        "n_params": net.parameter_count,
        **extra,
    }
    encoded = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as stream:
        stream.write(CHECKPOINT_MAGIC)
        stream.write(_CHECKPOINT_LENGTH.pack(len(encoded)))
        stream.write(encoded)
        stream.write(net.params.astype("<f8").tobytes())
    return


def load_checkpoint(path) -> tuple:
    """Rebuild the network of a checkpoint; returns ``(net, header)``."""
    data = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + _CHECKPOINT_LENGTH.size
    if len(data) < prefix or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    (length,) = _CHECKPOINT_LENGTH.unpack_from(data, len(CHECKPOINT_MAGIC))
    try:
        header = json.loads(data[prefix : prefix + length])
    except ValueError as err:
        raise FormatError(f"{path}: unreadable checkpoint header: {err}") from err

    net = FusionNet(**header["architecture"])
    block = data[prefix + length :]
    if len(block) != 8 * net.parameter_count:
        raise FormatError(f"{path}: expected {net.parameter_count} parameters, found {len(block) / 8:g}")
    net.params[...] = np.frombuffer(block, dtype="<f8")
    net.load_buffers(header["buffers"])
    return net, header
