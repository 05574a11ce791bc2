"""
SGD with momentum and weight decay, plateau-triggered /10 annealing, and
the epoch loop over weighted-random window batches.

Update rule, per parameter tensor::

    v <- mu * v - lr * (g + lambda * w)      (lambda = 0 for biases and BN)
    w <- w + v
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .datapipe import LevelWeights, WindowPool, label_level, weighted_batch
from .errors import ConfigurationError, TrainingDiverged
from .network import cross_entropy_loss, mse_loss, write_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_mse", "val_mse", "lr", "anneal_count")


@dataclass
class OptimState:
    learning_rate: float
    initial_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)
    anneal_count: int = 0
    max_anneals: int = 3
    patience: int = 5
    min_rel_improve: float = 0.01
    plateau_start: int = 0  # history index where the current plateau window begins

    @classmethod
    def create(cls, learning_rate=0.01, **kwargs):
        return cls(learning_rate=learning_rate, initial_rate=learning_rate, **kwargs)


def sgd_step(params, grads, state, decay_mask=None):
    """One in-place momentum step over ``params`` (name -> array).

    Every gradient is checked before anything is touched; a non-finite
    entry raises :class:`TrainingDiverged` naming the tensor.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingDiverged(f"non-finite gradient in {name}: {bad} of {np.size(g)} entries")
    lr, mu = state.learning_rate, state.momentum
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ConfigurationError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        decay = state.weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        step = g + decay * w if decay else g
        v *= mu
        v -= lr * step
        w += v
    return params


def plateaued(val_history, start, patience, min_rel_improve):
    """True when the best value of the last ``patience`` entries of
    ``val_history[start:]`` is not at least ``min_rel_improve`` (relative)
    below the best value before them."""
    window = list(val_history[start:])
    if len(window) <= patience:
        return False
    before = min(window[:-patience])
    recent = min(window[-patience:])
    return recent > before * (1.0 - min_rel_improve)


def maybe_anneal(state, val_history):
    """Divide the learning rate by 10 on a plateau, at most ``max_anneals`` times."""
    if state.anneal_count >= state.max_anneals:
        return state
    if plateaued(val_history, state.plateau_start, state.patience, state.min_rel_improve):
        state.learning_rate = state.initial_rate / 10.0 ** (state.anneal_count + 1)
        state.anneal_count += 1
        state.plateau_start = len(val_history) - 1
    return state


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 100
    steps_per_epoch: int = 50
    patience: int = 5
    min_rel_improve: float = 0.01
    max_anneals: int = 3
    level_weights: object = None  # None (uniform over present levels), "natural" or 16 weights
    monitor_windows: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size, steps_per_epoch and max_epochs must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("need learning_rate >= 0, weight_decay >= 0, 0 <= momentum < 1")
        if isinstance(self.level_weights, str) and self.level_weights != "natural":
            raise ConfigurationError(f"unknown level_weights {self.level_weights!r}; use 'natural' or 16 numbers")


@dataclass
class TrainRun:
    history: list = field(default_factory=list)
    best_val: float = float("inf")
    best_epoch: int = 0
    stop_reason: str = ""
    seed: int = 0
    batch_size: int = 0
    checkpoint: str = None

    @property
    def epochs(self):
        return len(self.history)

    def write_history(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


def _batch_loss(net, data, targets, mask, training):
    out = net.forward(data, training=training)
    if net.config.head == "classification":
        return cross_entropy_loss(out, label_level(targets[:, -1]))
    return mse_loss(out, targets, mask)


def window_mse(net, pool, indices, chunk=256):
    """Masked MSE (all rows) of inference-mode predictions on pool windows."""
    total, count = 0.0, 0.0
    for i in range(0, len(indices), chunk):
        d, t, m = pool.gather(indices[i : i + chunk])
        pred = net.forward(d)
        if net.config.head == "classification":
            pred = expected_level(pred)
            t, m = t[:, -1], m[:, -1]
        total += float((((pred - t) * m) ** 2).sum())
        count += float(m.sum())
    return total / max(count, 1.0)


def expected_level(probs):
    return probs @ np.arange(probs.shape[-1], dtype=probs.dtype)


def train(net, train_sequences, val_sequences=None, config=None, checkpoint_path=None, history_path=None):
    """Fit ``net`` in place and return the :class:`TrainRun`.

    Each epoch runs ``steps_per_epoch`` SGD steps on weighted-random
    batches, then records the inference-mode training MSE on a fixed
    monitor subset and the per-frame validation MSE (training MSE when no
    validation sequences are given). The best-validation weights are
    restored at the end and written to ``checkpoint_path``.
    """
    from .evaluation import evaluate_sequences

    config = config or TrainConfig()
    H = net.config.input_h
    pool = WindowPool(train_sequences, H)
    if config.level_weights is None:
        weights = LevelWeights(np.isin(np.arange(16), pool.present_levels).astype(float))
    elif isinstance(config.level_weights, str):
        # "natural": each level weighted by its own frequency in the pool
        weights = LevelWeights(np.bincount(pool.levels, minlength=16).astype(float))
    else:
        weights = LevelWeights(config.level_weights)
    rng = np.random.default_rng(config.seed)
    net.dropout.reseed(config.seed + 1)
    monitor = np.sort(rng.permutation(len(pool))[: config.monitor_windows])
    state = OptimState.create(
        config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        max_anneals=config.max_anneals,
        patience=config.patience,
        min_rel_improve=config.min_rel_improve,
    )
    params = net.parameters()
    decay = net.decay_mask()
    run = TrainRun(seed=config.seed, batch_size=config.batch_size, checkpoint=checkpoint_path)
    best_state = net.copy_state()
    val_history = []

    def finish(reason):
        net.load_state(list(best_state.values()))
        run.stop_reason = reason
        if checkpoint_path:
            write_checkpoint(net, checkpoint_path)
        if history_path:
            run.write_history(history_path)

    for epoch in range(1, config.max_epochs + 1):
        for _ in range(config.steps_per_epoch):
            idx = weighted_batch(pool, weights, config.batch_size, rng)
            d, t, m = pool.gather(idx)
            loss, grad = _batch_loss(net, d, t, m, training=True)
            if not np.isfinite(loss):
                finish("diverged")
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", checkpoint_path)
            net.backward(grad)
            try:
                sgd_step(params, net.grads, state, decay)
            except TrainingDiverged:
                finish("diverged")
                raise
        train_mse = window_mse(net, pool, monitor)
        val_mse = evaluate_sequences(net, val_sequences)["mse"] if val_sequences else train_mse
        if not np.isfinite(train_mse) or not np.isfinite(val_mse):
            finish("diverged")
            raise TrainingDiverged(f"non-finite evaluation loss at epoch {epoch}", checkpoint_path)
        run.history.append(
            {"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse,
             "lr": state.learning_rate, "anneal_count": state.anneal_count}
        )
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_mse, val_mse, state.learning_rate)
        val_history.append(val_mse)
        if val_mse < run.best_val:
            run.best_val, run.best_epoch = val_mse, epoch
            best_state = net.copy_state()
        if state.anneal_count >= state.max_anneals and plateaued(
            val_history, state.plateau_start, state.patience, state.min_rel_improve
        ):
            finish("plateau after final anneal")
            return run
        maybe_anneal(state, val_history)
    finish("max_epochs")
    return run
