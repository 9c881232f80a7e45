"""Fusion network with hand-written backpropagation.

An encoder maps the waveform to ``E`` features, a demographics branch maps the
covariates to 32 features, and a fusion trunk followed by a linear head maps their
concatenation to one log-risk or logit (``head_dim = 1``) or one logit per time bin
(``head_dim = 100``).

All parameters live in one flat float64 vector; layers are views into it and the
gradient uses the same layout.
"""

import numpy as np
from loguru import logger as log
from numpy.lib.stride_tricks import sliding_window_view

from survbench.data import N_CHANNELS
from survbench.lib import ConfigError, ShapeError, make_rng

ENCODERS = ("TabularZero", "WaveStats", "TinyConv")
ENCODER_DIM = 64
WAVE_STATS_DIM = 160
DEMOGRAPHICS_DIM = 32
TRUNK_DIM = 128
DEPTH = 3
N_WAVE_STATS = 6 * N_CHANNELS
POOL = 4
CONV1 = (8, 8, 4)  # out channels, kernel, stride
CONV2 = (16, 8, 4)
SCALE_FLOOR = 1e-8
_CHUNK = 256


# ---------------------------------------------------------------------------- encoder inputs


def wave_stats(waveforms: np.ndarray) -> np.ndarray:
    """Per-channel mean, std, max |x|, peak-to-peak, mean energy and max first difference."""
    waveforms = np.asarray(waveforms)
    if waveforms.ndim != 3 or waveforms.shape[2] != N_CHANNELS:
        raise ShapeError(f"waveforms must be (n, samples, {N_CHANNELS}), got {waveforms.shape}")
    out = np.empty((len(waveforms), N_WAVE_STATS))
    for start in range(0, len(waveforms), _CHUNK):
        x = waveforms[start : start + _CHUNK].astype(np.float64)
        out[start : start + _CHUNK] = np.hstack(
            [
                x.mean(axis=1),
                x.std(axis=1),
                np.abs(x).max(axis=1),
                np.ptp(x, axis=1),
                (x**2).mean(axis=1),
                np.abs(np.diff(x, axis=1)).max(axis=1),
            ]
        )
    return out


def pooled_waveforms(waveforms: np.ndarray) -> np.ndarray:
    """Channel-first waveforms averaged over blocks of 4 samples, as float32."""
    waveforms = np.asarray(waveforms)
    n, samples, channels = waveforms.shape
    if channels != N_CHANNELS or samples % POOL:
        raise ShapeError(f"cannot pool waveforms of shape {waveforms.shape}")
    pooled = waveforms.reshape(n, samples // POOL, POOL, channels).mean(axis=2, dtype=np.float64)
    return np.ascontiguousarray(pooled.transpose(0, 2, 1), dtype=np.float32)


def encoder_inputs(kind: str, waveforms: np.ndarray) -> np.ndarray:
    """What the encoder consumes: nothing, wave statistics or pooled waveforms."""
    if kind == "TabularZero":
        return np.zeros((len(waveforms), 0))
    if kind == "WaveStats":
        return wave_stats(waveforms)
    if kind == "TinyConv":
        return pooled_waveforms(waveforms)
    raise ConfigError(f"unknown encoder {kind!r}; expected one of {ENCODERS}")


# ---------------------------------------------------------------------------- layers


def _relu(z):
    return np.maximum(z, 0.0)


def _conv_forward(x, w, b, stride):
    windows = sliding_window_view(x, w.shape[2], axis=2)[:, :, ::stride, :]
    return np.einsum("bclk,ock->bol", windows, w, optimize=True) + b[None, :, None], windows


def _conv_backward(d_out, windows, w, stride, length):
    d_w = np.einsum("bol,bclk->ock", d_out, windows, optimize=True)
    d_b = d_out.sum(axis=(0, 2))
    d_windows = np.einsum("bol,ock->bclk", d_out, w, optimize=True)
    d_x = np.zeros((d_out.shape[0], w.shape[1], length))
    span = stride * d_out.shape[2]
    for k in range(w.shape[2]):
        d_x[:, :, k : k + span : stride] += d_windows[:, :, :, k]
    return d_x, d_w, d_b


class FusionNet(object):
    """Encoder + demographics branch + fusion trunk + head.

    Parameters
    ----------
    encoder_kind : :class:`str`
        ``TabularZero``, ``WaveStats`` or ``TinyConv``.
    n_covariates : :class:`int`
        Covariate width; 0 skips the demographics branch.
    head_dim : :class:`int`
        1 for DeepSurv and classifiers, 100 for discrete-time heads.
    seed : :class:`int`
        Seed of the He-uniform initialization.
    """

    def __init__(self, encoder_kind: str, n_covariates: int, head_dim: int, seed: int = 0) -> None:
        if encoder_kind not in ENCODERS:
            raise ConfigError(f"unknown encoder {encoder_kind!r}; expected one of {ENCODERS}")
        if n_covariates < 0 or head_dim < 1:
            raise ConfigError(f"invalid network widths: covariates {n_covariates}, head {head_dim}")
        self.encoder_kind = encoder_kind
        self.n_covariates = int(n_covariates)
        self.head_dim = int(head_dim)
        self.seed = int(seed)

        self.shapes = self._layout()
        self.slices = {}
        offset = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.params = np.zeros(offset)
        self._initialize()

        self.feature_mean = np.zeros(self.feature_width)
        self.feature_std = np.ones(self.feature_width)
        self.covariate_mean = np.zeros(self.n_covariates)
        self.covariate_std = np.ones(self.n_covariates)
        log.debug(f"{self.describe()}: {self.parameter_count} parameters")
        return

    @property
    def encoder_dim(self) -> int:
        if self.encoder_kind == "WaveStats":
            return WAVE_STATS_DIM
        return 1 if self.encoder_kind == "TabularZero" else ENCODER_DIM

    @property
    def feature_width(self) -> int:
        return N_WAVE_STATS if self.encoder_kind == "WaveStats" else 0

    @property
    def parameter_count(self) -> int:
        return int(self.params.size)

    def describe(self) -> str:
        return f"FusionNet({self.encoder_kind}, covariates={self.n_covariates}, head={self.head_dim})"

    def _dense(self, layout: dict, name: str, fan_in: int, fan_out: int) -> None:
        layout[f"{name}.weight"] = (fan_in, fan_out)
        layout[f"{name}.bias"] = (fan_out,)

    def _layout(self) -> dict:
        layout = {}
        if self.encoder_kind == "WaveStats":
            self._dense(layout, "encoder.dense", N_WAVE_STATS, WAVE_STATS_DIM)
        elif self.encoder_kind == "TinyConv":
            layout["encoder.conv1.weight"] = (CONV1[0], N_CHANNELS, CONV1[1])
            layout["encoder.conv1.bias"] = (CONV1[0],)
            layout["encoder.conv2.weight"] = (CONV2[0], CONV1[0], CONV2[1])
            layout["encoder.conv2.bias"] = (CONV2[0],)
            self._dense(layout, "encoder.dense", CONV2[0], ENCODER_DIM)

        width = self.n_covariates
        if self.n_covariates:
            for i in range(DEPTH):
                self._dense(layout, f"demographics.{i}", width, DEMOGRAPHICS_DIM)
                width = DEMOGRAPHICS_DIM
        width = self.encoder_dim + (DEMOGRAPHICS_DIM if self.n_covariates else 0)
        for i in range(DEPTH):
            self._dense(layout, f"trunk.{i}", width, TRUNK_DIM)
            width = TRUNK_DIM
        self._dense(layout, "head", TRUNK_DIM, self.head_dim)
        return layout

    def _initialize(self) -> None:
        rng = make_rng(self.seed, 7)
        for name, shape in self.shapes.items():
            if name.endswith(".bias"):
                continue
            fan_in = shape[0] if len(shape) == 2 else shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            self.view(self.params, name)[...] = rng.uniform(-bound, bound, shape)
        return

    def view(self, vector: np.ndarray, name: str) -> np.ndarray:
        """Layer ``name`` as a view into a parameter-shaped ``vector``."""
        return vector[self.slices[name]].reshape(self.shapes[name])

    def calibrate(self, features: np.ndarray, covariates: np.ndarray) -> None:
        """Store training-set mean/std of encoder features and covariates for input scaling."""
        if self.feature_width:
            self.feature_mean = features.mean(axis=0)
            self.feature_std = np.maximum(features.std(axis=0), SCALE_FLOOR)
        if self.n_covariates:
            covariates = np.asarray(covariates, dtype=np.float64)
            self.covariate_mean = covariates.mean(axis=0)
            self.covariate_std = np.maximum(covariates.std(axis=0), SCALE_FLOOR)
        return

    def buffers(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "covariate_mean": self.covariate_mean.tolist(),
            "covariate_std": self.covariate_std.tolist(),
        }

    def load_buffers(self, data: dict) -> None:
        for key in ("feature_mean", "feature_std", "covariate_mean", "covariate_std"):
            setattr(self, key, np.array(data[key], dtype=np.float64))
        return

    def architecture(self) -> dict:
        return {
            "encoder_kind": self.encoder_kind,
            "n_covariates": self.n_covariates,
            "head_dim": self.head_dim,
            "seed": self.seed,
        }

    # ------------------------------------------------------------------------ forward

    def _check_inputs(self, features, covariates) -> tuple:
        covariates = np.asarray(covariates, dtype=np.float64)
        if covariates.ndim != 2 or covariates.shape[1] != self.n_covariates:
            raise ShapeError(f"{self.describe()} expects (batch, {self.n_covariates}) covariates, got {covariates.shape}")
        batch = len(covariates)
        if len(features) != batch:
            raise ShapeError(f"{len(features)} encoder inputs for {batch} covariate rows")
        if self.encoder_kind == "WaveStats" and np.shape(features)[1:] != (N_WAVE_STATS,):
            raise ShapeError(f"WaveStats expects ({N_WAVE_STATS},) features, got {np.shape(features)[1:]}")
        if self.encoder_kind == "TinyConv" and (np.ndim(features) != 3 or np.shape(features)[1] != N_CHANNELS):
            raise ShapeError(f"TinyConv expects ({N_CHANNELS}, samples) inputs, got {np.shape(features)[1:]}")
        return features, covariates, batch

    def _chain(self, params, names, a, memory, relu=True) -> np.ndarray:
        for name in names:
            z = a @ self.view(params, f"{name}.weight") + self.view(params, f"{name}.bias")
            memory.append((name, a, z))
            a = _relu(z) if relu else z
        return a

    def _chain_backward(self, params, grad, memory, d_a, relu=True) -> np.ndarray:
        for name, a, z in reversed(memory):
            if relu:
                d_a = d_a * (z > 0)
            self.view(grad, f"{name}.weight")[...] = a.T @ d_a
            self.view(grad, f"{name}.bias")[...] = d_a.sum(axis=0)
            d_a = d_a @ self.view(params, f"{name}.weight").T
        return d_a

    def forward(self, features, covariates, params=None) -> tuple:
        """Network output ``(batch, head_dim)`` and the memory needed by :meth:`backward`."""
        params = self.params if params is None else params
        features, covariates, batch = self._check_inputs(features, covariates)
        cache = {"batch": batch, "encoder": [], "demographics": [], "trunk": [], "head": []}

        if self.encoder_kind == "TabularZero":
            encoded = np.zeros((batch, 1))
        elif self.encoder_kind == "WaveStats":
            x = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std
            encoded = self._chain(params, ["encoder.dense"], x, cache["encoder"])
        else:
            x = np.asarray(features, dtype=np.float64)
            w1 = self.view(params, "encoder.conv1.weight")
            z1, windows1 = _conv_forward(x, w1, self.view(params, "encoder.conv1.bias"), CONV1[2])
            w2 = self.view(params, "encoder.conv2.weight")
            z2, windows2 = _conv_forward(_relu(z1), w2, self.view(params, "encoder.conv2.bias"), CONV2[2])
            cache["conv"] = (x.shape[2], windows1, z1, windows2, z2)
            encoded = self._chain(params, ["encoder.dense"], _relu(z2).mean(axis=2), cache["encoder"])

        parts = [encoded]
        if self.n_covariates:
            x = (covariates - self.covariate_mean) / self.covariate_std
            names = [f"demographics.{i}" for i in range(DEPTH)]
            parts.append(self._chain(params, names, x, cache["demographics"]))
        hidden = self._chain(params, [f"trunk.{i}" for i in range(DEPTH)], np.hstack(parts), cache["trunk"])
        out = self._chain(params, ["head"], hidden, cache["head"], relu=False)
        return out, cache

    def backward(self, cache: dict, d_out: np.ndarray, params=None) -> np.ndarray:
        """Gradient of the loss w.r.t. the flat parameters given ``d_out`` = dL/d(output)."""
        params = self.params if params is None else params
        grad = np.zeros_like(params)
        d_out = np.asarray(d_out, dtype=np.float64).reshape(cache["batch"], self.head_dim)

        d_hidden = self._chain_backward(params, grad, cache["head"], d_out, relu=False)
        d_fused = self._chain_backward(params, grad, cache["trunk"], d_hidden)
        d_encoded = d_fused[:, : self.encoder_dim]
        if self.n_covariates:
            self._chain_backward(params, grad, cache["demographics"], d_fused[:, self.encoder_dim :])
        if self.encoder_kind == "TabularZero":
            return grad

        d_pooled = self._chain_backward(params, grad, cache["encoder"], d_encoded)
        if self.encoder_kind == "TinyConv":
            length, windows1, z1, windows2, z2 = cache["conv"]
            d_z2 = np.repeat(d_pooled[:, :, None] / z2.shape[2], z2.shape[2], axis=2) * (z2 > 0)
            w2 = self.view(params, "encoder.conv2.weight")
            d_a1, d_w2, d_b2 = _conv_backward(d_z2, windows2, w2, CONV2[2], z1.shape[2])
            self.view(grad, "encoder.conv2.weight")[...] = d_w2
            self.view(grad, "encoder.conv2.bias")[...] = d_b2
            w1 = self.view(params, "encoder.conv1.weight")
            _, d_w1, d_b1 = _conv_backward(d_a1 * (z1 > 0), windows1, w1, CONV1[2], length)
            self.view(grad, "encoder.conv1.weight")[...] = d_w1
            self.view(grad, "encoder.conv1.bias")[...] = d_b1
        return grad

    def predict(self, features, covariates, params=None) -> np.ndarray:
        """Forward pass in chunks, without keeping the backward memory."""
        covariates = np.asarray(covariates, dtype=np.float64).reshape(len(features), self.n_covariates)
        outputs = [
            self.forward(features[start : start + _CHUNK], covariates[start : start + _CHUNK], params)[0]
            for start in range(0, len(covariates), _CHUNK)
        ]
        return np.vstack(outputs) if outputs else np.zeros((0, self.head_dim))

    pass


def parameter_count(net: FusionNet) -> int:
    return net.parameter_count
