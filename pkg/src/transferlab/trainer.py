"""SGD training, evaluation and compression-constrained fine-tuning."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset, batches
from .model import Checkpoint, build_graph, predict

__all__ = ["TrainConfig", "EpochRecord", "NumericalError", "learning_rate", "train", "evaluate", "write_log"]

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    base_lr: float = 0.01
    decay_points: tuple[int, ...] = (5, 7, 9)
    decay_factor: float = 10.0
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0
    max_grad_norm: float | None = None  # global L2 clip on each step's gradient

    def __post_init__(self):
        object.__setattr__(self, "decay_points", tuple(int(d) for d in self.decay_points))
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be > 1, got {self.decay_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError(f"max_grad_norm must be > 0, got {self.max_grad_norm}")
        d = self.decay_points
        if len(d) > 3:
            raise ValueError(f"at most three decay points, got {d}")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"decay_points must be strictly increasing, got {d}")
        if d and (d[0] < 0 or d[-1] >= max(self.epochs, 1)):
            raise ValueError(f"decay_points {d} must lie in [0, {self.epochs})")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["decay_points"] = list(self.decay_points)
        if out["max_grad_norm"] is None:
            del out["max_grad_norm"]  # keeps recipes of unclipped runs stable
        return out


def learning_rate(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for d in config.decay_points if d <= epoch)
    return config.base_lr / config.decay_factor**passed


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_accuracy: float | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochRecord] = field(default_factory=list)


def evaluate(checkpoint: Checkpoint, dataset: LabeledDataset, batch_size: int = 500) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(dataset) == 0:
        return 0.0
    pred = predict(checkpoint, dataset.images, batch_size=batch_size)
    return float(np.mean(pred == dataset.labels))


# Called between optimisation steps with (checkpoint params, masks, step); may edit masks in place.
StepHook = Callable[[dict, dict, int], None]


def train(
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    config: TrainConfig,
    eval_dataset: LabeledDataset | None = None,
    *,
    masked_updates: bool = False,
    step_hook: StepHook | None = None,
) -> TrainResult:
    """Train a copy of ``checkpoint`` with momentum SGD.

    Masked weights get their gradient zeroed and stay exactly zero, unless
    ``masked_updates`` is set (dynamic network surgery lets them keep
    learning so they can regrow).  Quantised checkpoints are trained with the
    straight-through estimator: the forward pass sees quantised weights and
    activations, the update lands on full-precision master weights.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    ckpt = checkpoint.replace()
    params, masks = ckpt.params, ckpt.masks
    if masks and not masked_updates:
        for name, m in masks.items():
            params[name] *= m
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    log: list[EpochRecord] = []
    step = 0
    for epoch in range(config.epochs):
        lr_value = learning_rate(config, epoch)
        lr = np.float32(lr_value)
        losses = []
        for images, labels in batches(dataset, config.batch_size, shuffle_seed=config.seed * 1000 + epoch):
            graph = build_graph(ckpt, images, param_grad=True)
            loss = ad.softmax_cross_entropy(graph.logits, labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step} (lr={lr_value:g})")
            losses.append(value)
            grads = ad.backward(loss, graph.params.values())
            scale = np.float32(1.0)
            if config.max_grad_norm is not None:
                norm = float(np.sqrt(sum(float(np.sum(np.square(grads[leaf].data, dtype=np.float64))) for leaf in graph.params.values())))
                if norm > config.max_grad_norm:
                    scale = np.float32(config.max_grad_norm / norm)
            for name, leaf in graph.params.items():
                g = grads[leaf].data * scale if scale != 1 else grads[leaf].data
                if name in masks and not masked_updates:
                    g = g * masks[name]
                v = velocity[name]
                v *= np.float32(config.momentum)
                v -= lr * g
                params[name] += v
            step += 1
            if step_hook is not None:
                step_hook(params, masks, step)
        acc = evaluate(ckpt, eval_dataset) if eval_dataset is not None else None
        record = EpochRecord(epoch, lr_value, float(np.mean(losses)), acc)
        log.append(record)
        logger.info("epoch %d lr=%g loss=%.4f acc=%s", epoch, record.lr, record.train_loss, acc)

    if config.epochs == 0:
        return TrainResult(ckpt, log)
    prior = int(ckpt.metadata.get("epochs", "0"))
    ckpt.metadata.update(
        epochs=str(prior + config.epochs),
        train_seed=str(config.seed),
        momentum=str(config.momentum),
        base_lr=str(config.base_lr),
    )
    return TrainResult(ckpt, log)


def write_log(log: list[EpochRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "test_accuracy"])
        for r in log:
            acc = "" if r.test_accuracy is None else f"{r.test_accuracy:.6f}"
            w.writerow([r.epoch, f"{r.lr:.8g}", f"{r.train_loss:.6f}", acc])
    return path
