"""Maximum-likelihood training with Adam, a step schedule and best-checkpoint selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from raregen.errors import ContractError, NumericError, TrainingError
from raregen.flow.model import FlowConfig, FlowModel, MinMaxScaler
from raregen.numerics import AdamState, StepLR, adam_step
from raregen.numerics import tape as T

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    base_lr: float = 1e-4
    step_size: int = 500
    gamma: float = 0.1
    val_fraction: float = 0.3
    eval_every: int = 0  # iterations between validation passes; 0 means once per epoch


@dataclass
class TrainResult:
    model: FlowModel
    train_nll: list = field(default_factory=list)  # one entry per iteration
    val_nll: list = field(default_factory=list)  # (iteration, mean NLL), first entry before any step
    best_iteration: int = 0

    @property
    def best_val_nll(self) -> float:
        return min(v for _, v in self.val_nll)


def mean_nll(model: FlowModel, data, params=None, chunk: int = 4096) -> float:
    """Average negative log-likelihood (scaled space) over ``data``."""
    total = 0.0
    for start in range(0, len(data), chunk):
        total -= float(np.sum(model.log_prob(data[start : start + chunk], params).value))
    return total / len(data)


def initialize_actnorm(model: FlowModel, batch) -> FlowModel:
    """Data-dependent actnorm initialization: zero mean, unit variance per channel on ``batch``."""
    params = dict(model.params)

    def hook(layer, h):
        for k, v in layer.data_init(h).items():
            params[f"{layer.name}.{k}"] = v

    model.transform(np.asarray(batch, dtype=np.float64), params=params, on_actnorm=hook)
    return model.copy(params)


def train_flow(data, config: FlowConfig, seed, train: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit a flow to ``data`` by minimizing the mean negative log-likelihood.

    The data are shuffled with ``seed`` and split into training and
    validation parts; the returned model carries the parameters with the
    lowest validation NLL seen (the untrained model included).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != config.input_dim:
        raise ContractError(f"data must have shape (count, {config.input_dim}), got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ContractError("training data contain non-finite values")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = int(round(train.val_fraction * len(data)))
    val, fit = data[order[:n_val]], data[order[n_val:]]
    if len(fit) < train.batch_size:
        raise ContractError(f"need at least batch_size={train.batch_size} training points, got {len(fit)}")
    if len(val) == 0:
        val = fit

    model = FlowModel.create(config, MinMaxScaler.fit(fit), seed=int(rng.integers(2**32)))
    first = rng.permutation(len(fit))[: train.batch_size]
    model = initialize_actnorm(model, fit[first])

    schedule = StepLR(train.base_lr, train.step_size, train.gamma)
    names = list(model.params)
    values = [model.params[k] for k in names]
    state = AdamState()
    result = TrainResult(model=model)
    best_val = mean_nll(model, val)
    best_values = values
    result.val_nll.append((0, best_val))
    per_epoch = len(fit) // train.batch_size
    eval_every = train.eval_every or per_epoch
    iteration = 0

    for epoch in range(train.epochs):
        perm = rng.permutation(len(fit))
        for b in range(per_epoch):
            batch = fit[perm[b * train.batch_size : (b + 1) * train.batch_size]]
            leaves = [T.variable(v) for v in values]
            try:
                nll = -T.mean(model.log_prob(batch, dict(zip(names, leaves))))
                loss = float(nll.value)
                if not np.isfinite(loss):
                    raise TrainingError("training diverged: non-finite NLL", iteration)
                grads = T.grad(nll, leaves)
            except NumericError as exc:
                if isinstance(exc, TrainingError):
                    raise
                raise TrainingError(f"training diverged: {exc}", iteration) from exc
            values, state = adam_step(values, grads, state, schedule(iteration))
            iteration += 1
            result.train_nll.append(loss)
            if iteration % eval_every == 0:
                try:
                    current = mean_nll(model, val, dict(zip(names, values)))
                except NumericError as exc:
                    raise TrainingError(f"training diverged: {exc}", iteration) from exc
                if not np.isfinite(current):
                    raise TrainingError("training diverged: non-finite validation NLL", iteration)
                result.val_nll.append((iteration, current))
                if current < best_val:
                    best_val, best_values, result.best_iteration = current, values, iteration
        log.debug("epoch %d: last train NLL %.4f, best val NLL %.4f", epoch, result.train_nll[-1], best_val)

    result.model = model.copy(dict(zip(names, best_values)))
    return result
