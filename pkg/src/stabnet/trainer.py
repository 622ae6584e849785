"""SGD training over replica batches, evaluation and metrics output."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import TransformSpec
from .data import Dataset, SplitManifest, build_batches, steps_per_epoch
from .errors import ConfigError, NumericError, ParameterError
from .layers import (
    LayerSpec,
    Network,
    StochasticMode,
    init_network,
    load_network,
    network_forward,
    save_network,
)
from .losses import LossWeights, batch_objective
from .rng import RngStreams
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,objective,sup,ts,me,test_err_pct,seconds"

save_checkpoint = save_network
load_checkpoint = load_network


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.95
    weights: LossWeights = field(default_factory=LossWeights)
    n: int = 4
    groups_per_batch: int = 32
    labeled_fraction: float = 0.5
    seed: int = 0
    transform: TransformSpec = field(default_factory=TransformSpec.identity)
    architecture: list[LayerSpec] = field(default_factory=list)
    normalize_pairs: bool = False
    warmup_epochs: int = 0
    steps_per_epoch: int | None = None
    eval_passes: int = 1
    eval_stochastic: bool = False
    record_wall_time: bool = False

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if not self.lr_decay > 0:
            raise ConfigError(f"lr_decay must be > 0, got {self.lr_decay}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if self.eval_passes < 1:
            raise ConfigError(f"eval_passes must be >= 1, got {self.eval_passes}")
        if not self.architecture:
            raise ConfigError("architecture is empty")


@dataclass
class MetricsRow:
    epoch: int
    train_objective: float
    sup_loss: float
    ts_loss: float
    me_loss: float
    test_error_pct: float
    wall_seconds: float

    def to_csv(self) -> str:
        vals = (self.train_objective, self.sup_loss, self.ts_loss, self.me_loss, self.test_error_pct)
        return ",".join([str(self.epoch), *(f"{v:.9g}" for v in vals), f"{self.wall_seconds:.3f}"])


def metrics_csv(rows: list[MetricsRow]) -> str:
    return "\n".join([METRICS_HEADER, *(r.to_csv() for r in rows)]) + "\n"


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    Path(path).write_text(metrics_csv(rows))


@dataclass
class EvalResult:
    error_pct: float
    probs: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def evaluate(net: Network, ds: Dataset, passes: int = 1, mode: StochasticMode | None = None,
             batch_size: int = 1000) -> EvalResult:
    """Error rate (percent) of the argmax of softmax outputs averaged over ``passes``.

    In deterministic mode (the default) one pass is enough and ``passes`` is ignored.
    Ties in the argmax go to the lowest class index.
    """
    if passes < 1:
        raise ParameterError(f"passes must be >= 1, got {passes}")
    if len(ds) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    mode = mode or StochasticMode.deterministic()
    if not mode.is_stochastic:
        passes = 1
    acc = np.zeros((len(ds), net.num_classes), dtype=np.float64)
    for _ in range(passes):
        for start in range(0, len(ds), batch_size):
            out = network_forward(net, Tensor(ds.x[start : start + batch_size]), mode)
            acc[start : start + batch_size] += out.data
    probs = acc / passes
    errors = int(np.count_nonzero(probs.argmax(axis=1) != ds.y))
    return EvalResult(100.0 * errors / len(ds), probs)


class SGD:
    """Momentum SGD: v <- momentum*v - lr*g; w <- w + v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        mu = np.float32(self.momentum)
        lr = np.float32(self.lr)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.velocity[i] = mu * self.velocity[i] - lr * p.grad
            p.data = p.data + self.velocity[i]


@dataclass
class TrainResult:
    net: Network
    metrics: list[MetricsRow]


def train(config: TrainConfig, ds_train: Dataset, manifest: SplitManifest, ds_test: Dataset,
          checkpoint_path=None, on_epoch: Callable[[MetricsRow], None] | None = None) -> TrainResult:
    """Train from scratch; the whole run is a deterministic function of ``config.seed``.

    If ``checkpoint_path`` is given the network is saved there before training
    and after every epoch, so a numeric abort leaves the last good weights.
    """
    config.validate()
    streams = RngStreams(config.seed)
    net = init_network(config.architecture, ds_train.sample_shape, streams)
    if net.num_classes != ds_train.num_classes:
        raise ConfigError(f"network outputs {net.num_classes} classes, dataset has {ds_train.num_classes}")
    mode = StochasticMode.stochastic(streams, "train")
    opt = SGD(net.parameters(), config.lr, config.momentum)
    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)

    steps = steps_per_epoch(manifest, config.groups_per_batch, config.labeled_fraction, config.steps_per_epoch)
    rows: list[MetricsRow] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        ramp = min(1.0, epoch / config.warmup_epochs) if config.warmup_epochs else 1.0
        weights = config.weights.scaled(ramp) if ramp != 1.0 else config.weights
        sums = np.zeros(4)
        batches = build_batches(ds_train, manifest, config.n, config.groups_per_batch, config.labeled_fraction,
                                config.transform, streams.derive_seed("batches", epoch), steps)
        for count, batch in enumerate(batches, start=1):
            probs = network_forward(net, Tensor(batch.inputs()), mode)
            objective, parts = batch_objective(probs, batch.labels, batch.n, weights, config.normalize_pairs)
            net.zero_grad()
            objective.backward()
            opt.step()
            sums += (parts.objective, parts.sup, parts.ts, parts.me)
        means = sums / count
        if not np.all(np.isfinite(means)):
            raise NumericError(f"non-finite epoch averages at epoch {epoch}")

        eval_mode = None
        if config.eval_stochastic:
            eval_mode = StochasticMode.stochastic(streams.derive_seed("eval", epoch), "eval")
        err = evaluate(net, ds_test, config.eval_passes, eval_mode).error_pct
        seconds = time.perf_counter() - t0
        row = MetricsRow(epoch, *means, err, seconds if config.record_wall_time else 0.0)
        rows.append(row)
        log.info("epoch %d objective %.4f sup %.4f ts %.4f me %.4f test_err %.2f%% (%.1fs)",
                 epoch, *means, err, seconds)
        if checkpoint_path is not None:
            save_checkpoint(net, checkpoint_path)
        if on_epoch is not None:
            on_epoch(row)
        opt.lr *= config.lr_decay
    return TrainResult(net, rows)
