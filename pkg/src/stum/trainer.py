"""Training loop: MAE loss, Adam, early stopping, gate-gradient check."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import FrameSeries, NormStats, PreparedData, TrafficGraph, make_windows
from .errors import ConfigError, MissingGrad, NonFiniteLoss, ShapeMismatch
from .model import StumModel
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    lr_alpha: float = 0.001
    weight_decay: float = 0.0005
    max_epochs: int = 150
    patience: int = 10
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0  # global-norm clip; <= 0 disables
    target_train_mae: float = 0.0  # > 0: also stop once inference-mode train MAE (raw units) gets below it

    def validate(self) -> None:
        if self.lr <= 0 or self.lr_alpha <= 0:
            raise ConfigError("learning rates must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


def mae_loss(z: Tensor, y) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=z.dtype))
    if z.shape != y.shape:
        raise ShapeMismatch(f"prediction {z.shape} vs target {y.shape}")
    return T.abs_mean(T.sub(z, y))


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Parameters come in groups ``(named_params, lr, weight_decay)``; moment
    buffers exist only for the tensors handed in, so frozen weights never get one.
    """

    def __init__(self, groups, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = [(list(params), lr, wd) for params, lr, wd in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for params, _, _ in self.groups:
            for name, p in params:
                if not p.requires_grad:
                    raise ValueError(f"{name} is frozen and cannot be optimized")
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def named_parameters(self):
        for params, _, _ in self.groups:
            yield from params

    def step(self) -> None:
        for name, p in self.named_parameters():
            if p.grad is None:
                raise MissingGrad(f"{name} has no gradient")
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for params, lr, wd in self.groups:
            for name, p in params:
                g = p.grad
                m = self.m[name]
                v = self.v[name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if wd:
                    update = update + wd * p.data
                p.data = (p.data - lr * update).astype(p.dtype, copy=False)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def make_optimizer(model: StumModel, cfg: TrainConfig) -> Adam:
    groups = [(model.theta_parameters(), cfg.lr, cfg.weight_decay)]
    gate = model.alpha_parameters()
    if gate:
        groups.append((gate, cfg.lr_alpha, 0.0))
    return Adam(groups, cfg.beta1, cfg.beta2, cfg.adam_eps)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for _, p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


class EarlyStopping:
    """Stop when the monitored value fails to improve for ``patience`` epochs."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best: float = math.inf
        self.best_epoch: int = 0
        self.since_improve = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value`` for ``epoch``; return True if it is a new best."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.since_improve = 0
            return True
        self.since_improve += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improve >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    seconds: float
    fit_mae: float | None = None  # inference-mode train MAE, only measured with a target


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_mae: float
    history: list[EpochRecord] = field(default_factory=list)
    steps: int = 0
    stop_reason: str = "max_epochs"
    step_seconds: float = 0.0  # wall clock inside optimizer steps only, validation excluded

    @property
    def seconds_per_step(self) -> float:
        return self.step_seconds / self.steps if self.steps else 0.0


def predict_split(
    model: StumModel,
    split: FrameSeries,
    graph: TrafficGraph | None,
    batch_size: int = 64,
):
    """Yield (batch, prediction) over every window of ``split`` in eval mode."""
    cfg = model.config
    with T.no_grad():
        for batch in make_windows(split, cfg.input_len, cfg.horizon, batch_size):
            out = model(batch.inputs.astype(model.dtype), graph, training=False)
            yield batch, out.data


def split_mae(
    model: StumModel,
    split: FrameSeries,
    stats: NormStats,
    graph: TrafficGraph | None,
    batch_size: int = 64,
) -> float:
    """Flat MAE of de-normalized predictions over every window of ``split``."""
    total = 0.0
    count = 0
    for batch, pred in predict_split(model, split, graph, batch_size):
        err = np.abs(stats.invert(pred.astype(np.float64)) - stats.invert(batch.targets))
        total += float(err.sum())
        count += err.size
    return total / count


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    model: StumModel,
    data: PreparedData,
    graph: TrafficGraph | None,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Fit ``model`` on ``data.train``; keep the state with the best validation MAE.

    The loss is optimized on the normalized scale; train/validation MAE in the
    history are in raw units. On return the model holds the best state.
    """
    cfg.validate()
    mcfg = model.config
    optimizer = make_optimizer(model, cfg)
    params = list(optimizer.named_parameters())
    stopper = EarlyStopping(cfg.patience)
    std = data.stats.std
    best_state = model.state_dict()
    history: list[EpochRecord] = []
    reason = "max_epochs"
    step_seconds = 0.0
    model.train()

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        abs_sum = 0.0
        n_elems = 0
        for step, batch in enumerate(
            make_windows(data.train, mcfg.input_len, mcfg.horizon, cfg.batch_size, _epoch_seed(cfg.seed, epoch))
        ):
            x = batch.inputs.astype(model.dtype)
            y = batch.targets.astype(model.dtype)
            tick = time.perf_counter()
            model.zero_grad()
            out = model(x, graph, training=True)
            loss = mae_loss(out, y)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, step {step}")
            T.backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            optimizer.step()
            step_seconds += time.perf_counter() - tick
            abs_sum += float((np.abs(out.data - y) * std.astype(model.dtype)).sum())
            n_elems += y.size

        train_mae = abs_sum / n_elems
        model.eval()
        val_mae = split_mae(model, data.val, data.stats, graph, cfg.batch_size)
        fit_mae = None
        if cfg.target_train_mae > 0:
            fit_mae = split_mae(model, data.train, data.stats, graph, cfg.batch_size)
        model.train()
        record = EpochRecord(epoch, train_mae, val_mae, time.perf_counter() - started, fit_mae)
        history.append(record)
        logger.info("epoch %d train_mae %.4f val_mae %.4f (%.1fs)", epoch, train_mae, val_mae, record.seconds)
        if on_epoch is not None:
            on_epoch(record)

        if stopper.update(val_mae, epoch):
            best_state = model.state_dict()
        if stopper.should_stop:
            reason = "patience"
            break
        if fit_mae is not None and fit_mae < cfg.target_train_mae:
            best_state = model.state_dict()
            reason = "target"
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_state, stopper.best_epoch, stopper.best, history, optimizer.steps, reason, step_seconds)


def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mae", "val_mae", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_mae), repr(r.val_mae), f"{r.seconds:.6f}"])


def alpha_gradient(model: StumModel, x, y, graph: TrafficGraph | None = None) -> np.ndarray:
    """Autodiff gradient of the MAE loss with respect to the fusion gate's raw parameter."""
    raw = model.gate.raw_gate
    model.zero_grad()
    loss = mae_loss(model(x, graph, training=False), y)
    T.backward(loss)
    grad = raw.grad.copy()
    model.zero_grad()
    return grad


def alpha_gradient_check(model: StumModel, x, y, graph: TrafficGraph | None = None, h: float = 1e-5) -> float:
    """Relative error between autodiff and central differences for the gate gradient."""
    if model.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    raw = model.gate.raw_gate
    x = model.as_input(x)
    y = np.asarray(y, dtype=np.float64)

    def loss_fn(_):
        return mae_loss(model(x, graph, training=False), y)

    err = T.finite_diff_check(loss_fn, raw, h)
    model.zero_grad()
    return err
