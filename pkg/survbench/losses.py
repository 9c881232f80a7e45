"""Survival losses with analytic gradients.

Every loss returns ``(loss, gradient)`` where the gradient is taken with respect to
the network output, and losses are averaged over the contributing records.
The discrete-time heads follow the PMF convention with an implicit last bin whose
logit is 0, so ``S`` at the last grid point stays positive.
"""

import numpy as np
from scipy.special import expit, logsumexp

from survbench.lib import ConfigError, PreconditionError, ShapeError

DISCRETE_KINDS = ("LogisticHazard", "MTLR", "DeepHit")
TAIL_FLOOR = 1e-12
_LOG_TAIL_FLOOR = np.log(TAIL_FLOOR)


def softplus(x):
    return np.logaddexp(0.0, x)


def _check_batch(logits, bins, events) -> tuple:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, bins), got {logits.shape}")
    bins = np.asarray(bins, dtype=np.int64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    if not (len(bins) == len(events) == len(logits)):
        raise ShapeError(f"batch of {len(logits)} logits with {len(bins)} bins and {len(events)} events")
    if len(bins) and (bins.min() < 0 or bins.max() >= logits.shape[1]):
        raise ShapeError(f"bin indices must lie in [0, {logits.shape[1] - 1}]")
    if not np.isfinite(logits).all():
        raise PreconditionError("logits must be finite")
    return logits, bins, events


# ---------------------------------------------------------------------------- DeepSurv


def loss_cox_batch(log_risks, times, events) -> tuple:
    """Negative Breslow partial log-likelihood of one batch, averaged over its events.

    Raises
    ------
    :class:`survbench.lib.PreconditionError`
        The batch has no event.
    """
    r = np.asarray(log_risks, dtype=np.float64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=bool).reshape(-1)
    if not (len(r) == len(times) == len(events)):
        raise ShapeError("log-risks, times and events differ in length")
    n_events = int(events.sum())
    if not n_events:
        raise PreconditionError("DeepSurv batch contains no event")

    shift = r.max()
    w = np.exp(r - shift)
    order = np.argsort(times, kind="stable")
    sorted_times = times[order]
    at_risk = np.cumsum(w[order][::-1])[::-1]

    # Risk-set sums for every event, then their cumulative inverse over event times.
    event_times = np.sort(times[events])
    denominators = at_risk[np.searchsorted(sorted_times, event_times, side="left")]
    loss = -(r[events].sum() - (np.log(denominators) + shift).sum()) / n_events

    inverse = np.concatenate(([0.0], np.cumsum(1.0 / denominators)))
    exposure = inverse[np.searchsorted(event_times, times, side="right")]
    grad = -(events - w * exposure) / n_events
    return float(loss), grad


def ensure_positive_event(batch, train_events, rng: np.random.Generator) -> np.ndarray:
    """Swap the last index of an event-free batch for a random event index of the training set."""
    batch = np.array(batch, dtype=np.int64)
    train_events = np.asarray(train_events, dtype=bool)
    positives = np.flatnonzero(train_events)
    if not len(positives):
        raise PreconditionError("training set contains no event")
    if not len(batch) or train_events[batch].any():
        return batch
    batch[-1] = rng.choice(positives)
    return batch


# ---------------------------------------------------------------------------- discrete time


def _padded_log_pmf(kind: str, logits: np.ndarray) -> np.ndarray:
    """Unnormalized log-PMF over ``bins + 1`` columns for MTLR and DeepHit."""
    if kind == "MTLR":
        logits = np.cumsum(logits[:, ::-1], axis=1)[:, ::-1]
    return np.pad(logits, ((0, 0), (0, 1)))


def _log_tails(z: np.ndarray) -> np.ndarray:
    """``log sum_{j >= k} exp(z_j)`` for every column ``k``."""
    return np.logaddexp.accumulate(z[:, ::-1], axis=1)[:, ::-1]


def _logistic_hazard(logits, bins, events) -> tuple:
    columns = np.arange(logits.shape[1])[None, :]
    mask = columns <= bins[:, None]
    target = (columns == bins[:, None]) & events[:, None]
    per_record = ((softplus(logits) - target * logits) * mask).sum(axis=1)
    grad = (expit(logits) - target) * mask
    return per_record, grad, np.zeros(len(bins), dtype=bool)


def _pmf_nll(z, bins, events) -> tuple:
    """NLL and its gradient w.r.t. the padded log-PMF ``z``."""
    rows = np.arange(len(bins))
    normalizer = logsumexp(z, axis=1)
    p = np.exp(z - normalizer[:, None])
    tails = _log_tails(z)[rows, bins + 1]
    log_tail = tails - normalizer

    clamped = ~events & (log_tail < _LOG_TAIL_FLOOR)
    per_record = np.where(events, normalizer - z[rows, bins], -np.maximum(log_tail, _LOG_TAIL_FLOOR))

    # Censored: p - q with q the PMF restricted to columns beyond the bin.
    beyond = np.arange(z.shape[1])[None, :] > bins[:, None]
    q = np.exp(np.where(beyond, z - tails[:, None], -np.inf))
    target = np.zeros_like(z)
    target[rows, bins] = 1.0
    grad = p - np.where(events[:, None], target, q)
    grad[clamped] = 0.0
    return per_record, grad, clamped, p


def _deephit_ranking(p, bins, events, times, sigma) -> tuple:
    """Mean ranking penalty over ordered pairs and its gradient w.r.t. ``p``."""
    valid = events[:, None] & (times[:, None] < times[None, :])
    n_pairs = int(valid.sum())
    if not n_pairs:
        return 0.0, np.zeros_like(p)
    cdf = np.cumsum(p, axis=1)
    own = cdf[np.arange(len(bins)), bins]
    others = cdf[:, bins].T
    eta = np.where(valid, np.exp(-(own[:, None] - others) / sigma), 0.0)
    loss = eta.sum() / n_pairs

    a = eta / (n_pairs * sigma)
    d_cdf = np.zeros((p.shape[1], len(bins)))
    np.add.at(d_cdf, bins, a)
    d_cdf = d_cdf.T
    d_cdf[np.arange(len(bins)), bins] -= a.sum(axis=1)
    d_p = np.cumsum(d_cdf[:, ::-1], axis=1)[:, ::-1]
    return float(loss), d_p


def _mtlr_backward(grad_z: np.ndarray) -> np.ndarray:
    # g_k = sum_{j >= k} logit_j, so dL/dlogit_i = sum_{k <= i} dL/dg_k.
    return np.cumsum(grad_z[:, :-1], axis=1)


def loss_discrete(kind: str, logits, bins, events, times=None, alpha: float = 0.2, sigma: float = 0.1) -> tuple:
    """Discrete-time survival loss for ``LogisticHazard``, ``MTLR`` or ``DeepHit``.

    Parameters
    ----------
    kind : :class:`str`
        Head kind.
    logits : :class:`numpy.ndarray`
        ``(batch, bins)`` network outputs.
    bins : :class:`numpy.ndarray`
        Discretized event or censoring bin per record.
    events : :class:`numpy.ndarray`
        Event indicators.
    times : :class:`numpy.ndarray`
        Continuous times, required by the DeepHit ranking term.
    alpha, sigma : :class:`float`
        DeepHit ranking weight and scale.

    Returns
    -------
    loss, gradient, diagnostics : :class:`float`, :class:`numpy.ndarray`, :class:`dict`
        ``diagnostics["clamped"]`` counts censored tails floored at 1e-12.
    """
    if kind not in DISCRETE_KINDS:
        raise ConfigError(f"unknown discrete loss {kind!r}; expected one of {DISCRETE_KINDS}")
    logits, bins, events = _check_batch(logits, bins, events)
    batch = len(bins)
    if not batch:
        return 0.0, np.zeros_like(logits), {"clamped": 0}

    if kind == "LogisticHazard":
        per_record, grad, clamped = _logistic_hazard(logits, bins, events)
        loss = per_record.mean()
        grad = grad / batch
    else:
        z = _padded_log_pmf(kind, logits)
        per_record, grad_z, clamped, p = _pmf_nll(z, bins, events)
        loss = per_record.mean()
        grad_z = grad_z / batch
        if kind == "DeepHit" and alpha:
            if times is None:
                raise ConfigError("DeepHit ranking needs continuous times")
            times = np.asarray(times, dtype=np.float64).reshape(-1)
            ranking, d_p = _deephit_ranking(p, bins, events, times, sigma)
            loss = loss + alpha * ranking
            # Softmax Jacobian-vector product.
            grad_z = grad_z + alpha * p * (d_p - (d_p * p).sum(axis=1, keepdims=True))
        grad = _mtlr_backward(grad_z) if kind == "MTLR" else grad_z[:, :-1]

    return float(loss), grad, {"clamped": int(clamped.sum())}


def survival_from_logits(kind: str, logits) -> np.ndarray:
    """Survival at each grid point implied by a discrete-time head.

    ``LogisticHazard``: ``S_k = prod_{j <= k} (1 - h_j)``; ``MTLR``/``DeepHit``:
    ``S_k = sum_{j > k} p_j``.
    """
    if kind not in DISCRETE_KINDS:
        raise ConfigError(f"unknown discrete head {kind!r}")
    logits = np.asarray(logits, dtype=np.float64)
    if kind == "LogisticHazard":
        survival = np.exp(-np.cumsum(softplus(logits), axis=1))
    else:
        z = _padded_log_pmf(kind, logits)
        survival = np.exp(_log_tails(z)[:, 1:] - logsumexp(z, axis=1)[:, None])
    survival = np.clip(survival, 0.0, 1.0)
    return np.minimum.accumulate(survival, axis=1)


# ---------------------------------------------------------------------------- classifier


def loss_bce(logits, labels) -> tuple:
    """Sigmoid cross-entropy ``softplus(x) - y * x``; gradient ``sigmoid(x) - y`` per record."""
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"{len(x)} logits for {len(y)} labels")
    if not len(x):
        return 0.0, np.zeros(0)
    loss = (softplus(x) - y * x).mean()
    return float(loss), (expit(x) - y) / len(x)
