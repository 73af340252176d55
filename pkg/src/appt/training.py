"""Desk-scale supervised training: cross-entropy, SGD with momentum and
weight decay, and a fully seeded epoch loop over synthetic clouds.

Everything (data, parameter init, per-epoch sample order) derives from
TrainConfig.seed, so one config always produces byte-identical history and
checkpoints. Updates are per-sample (clouds have varying N); evaluation
runs after every epoch on the held-out split.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .analysis import MetricsReport, segmentation_metrics
from .errors import (ConfigurationError, InputError, NumericError,
                     TrainingError)
from .network import Network, NetworkConfig, NetworkGeometry, prepare_geometry
from .nn import WEIGHT, ParamStore
from .pointcloud import (CLASS_IDS, PointCloud, SYNTHETIC_KINDS, cloud_class,
                         generate_synthetic)
from .rng import SplitMix64


def cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean over rows of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = logits.data.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(
            f"labels must lie in [0, {num_classes}), got "
            f"[{labels.min()}, {labels.max()}]")
    log_probs = ad.log_softmax(logits, axis=1)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum_along(ad.sum_along(ad.mul(log_probs, onehot), axis=1), axis=0)
    return ad.scale(picked, -1.0 / n)


@dataclass
class OptimizerState:
    velocities: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params.items()})


def sgd_step(params: ParamStore, state: OptimizerState, learning_rate: float,
             momentum: float, weight_decay: float) -> None:
    """g' = g + wd*theta (weights only); v <- momentum*v + g';
    theta <- theta - lr*v; gradients zeroed afterwards."""
    for name, t in params.items():
        g = t.grad
        if weight_decay and params.kind(name) == WEIGHT:
            g = g + weight_decay * t.data
        v = state.velocities[name]
        v *= momentum
        v += g
        t.data -= learning_rate * v
    params.zero_grad()
    state.step += 1


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic dataset: per-kind train/test cloud counts at a fixed size."""

    kinds: tuple
    train_per_kind: int
    test_per_kind: int
    points: int

    def __post_init__(self):
        kinds = tuple(self.kinds)
        object.__setattr__(self, "kinds", kinds)
        if not kinds:
            raise ConfigurationError("dataset needs at least one kind")
        for kind in kinds:
            if kind not in SYNTHETIC_KINDS:
                raise ConfigurationError(f"unknown synthetic kind {kind!r}")
        if self.train_per_kind < 1 or self.test_per_kind < 1:
            raise ConfigurationError("dataset needs train and test samples")
        if self.points < 8:
            raise ConfigurationError(f"clouds need >= 8 points, got {self.points}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    momentum: float
    weight_decay: float
    epochs: int
    seed: int
    task: str
    dataset: DatasetSpec
    target_metric: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(
                f"learning rate must be nonnegative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(
                f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(
                f"weight decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.task not in ("segmentation", "classification"):
            raise ConfigurationError(f"unknown task {self.task!r}")


@dataclass
class Sample:
    cloud: PointCloud
    geometry: NetworkGeometry
    labels: np.ndarray          # per point (segmentation) or length-1 (class)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    eval_metric: float


@dataclass
class TrainResult:
    config: NetworkConfig
    params: ParamStore
    history: list
    final_metrics: MetricsReport


def history_csv(history) -> str:
    lines = ["epoch,train_loss,eval_metric"]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss!r},{row.eval_metric!r}")
    return "\n".join(lines) + "\n"


def build_dataset(net_cfg: NetworkConfig, train_cfg: TrainConfig):
    """Seeded synthetic train/test splits with precomputed geometry."""
    spec = train_cfg.dataset
    base = SplitMix64(train_cfg.seed)
    classes = set()
    splits = {"train": [], "test": []}
    for kind in spec.kinds:
        counts = {"train": spec.train_per_kind, "test": spec.test_per_kind}
        for split, count in counts.items():
            for i in range(count):
                seed = int(base.derive(f"data/{kind}/{split}/{i}").seed)
                cloud = generate_synthetic(kind, spec.points, seed)
                if train_cfg.task == "classification":
                    label = np.array([cloud_class(cloud)], dtype=np.int64)
                    classes.add(int(label[0]))
                else:
                    if cloud.labels is None:
                        raise ConfigurationError(
                            f"kind {kind!r} carries no per-point labels")
                    label = cloud.labels
                    classes.update(int(c) for c in np.unique(label))
                geometry = prepare_geometry(net_cfg, cloud)
                splits[split].append(Sample(cloud, geometry, label))
    if len(classes) < 2:
        raise ConfigurationError(
            f"dataset spec yields {len(classes)} class(es); need at least 2")
    if max(classes) >= net_cfg.num_classes:
        raise ConfigurationError(
            f"dataset labels reach {max(classes)} but the network has "
            f"{net_cfg.num_classes} classes")
    return splits["train"], splits["test"]


def _predict(net: Network, params: ParamStore, sample: Sample) -> np.ndarray:
    logits = net.forward(params, sample.cloud, geometry=sample.geometry)
    return np.argmax(logits.data, axis=1)


def evaluate(net: Network, params: ParamStore, samples) -> MetricsReport:
    """Pooled confusion-matrix metrics over a list of samples."""
    preds, labels = [], []
    for sample in samples:
        preds.append(_predict(net, params, sample))
        labels.append(sample.labels)
    return segmentation_metrics(np.concatenate(preds), np.concatenate(labels),
                                net.cfg.num_classes)


def train_loop(net_cfg: NetworkConfig, train_cfg: TrainConfig) -> TrainResult:
    """Deterministic epoch loop; early-stops once target_metric is reached.

    The evaluation metric is held-out accuracy (classification) or mIoU
    (segmentation). Raises TrainingError with the epoch number if the loss
    goes non-finite.
    """
    if net_cfg.task != train_cfg.task:
        raise ConfigurationError(
            f"network task {net_cfg.task!r} != training task {train_cfg.task!r}")
    train, test = build_dataset(net_cfg, train_cfg)
    net = Network(net_cfg)
    base = SplitMix64(train_cfg.seed)
    params = net.init_params(seed=int(base.derive("init").seed))
    state = OptimizerState.for_params(params)

    history = []
    metrics = None
    for epoch in range(1, train_cfg.epochs + 1):
        order = base.derive(f"order/{epoch}").shuffled(len(train))
        losses = np.zeros(len(train))
        for j, idx in enumerate(order):
            sample = train[int(idx)]
            try:
                logits = net.forward(params, sample.cloud,
                                     geometry=sample.geometry)
                loss = cross_entropy(logits, sample.labels)
            except NumericError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: {exc}") from None
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"training diverged at epoch {epoch}")
            losses[j] = value
            ad.backward(loss, np.array(1.0))
            sgd_step(params, state, train_cfg.learning_rate,
                     train_cfg.momentum, train_cfg.weight_decay)
        metrics = evaluate(net, params, test)
        metric = metrics.oa if train_cfg.task == "classification" else metrics.miou
        history.append(EpochStats(epoch, float(losses.mean()), float(metric)))
        if train_cfg.target_metric is not None and metric >= train_cfg.target_metric:
            break
    return TrainResult(net_cfg, params, history, metrics)
