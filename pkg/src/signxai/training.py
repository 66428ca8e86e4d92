"""Head training over a frozen backbone.

The backbone never changes, so its feature maps are computed once per dataset
and the head alone is optimized on them. Gradients never reach the backbone
weights.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import _backend  # noqa: F401
import keras
import tensorflow as tf

from .dataset import encode_labels
from .errors import ArtifactIOError, ConfigError, DataError, NumericError
from .losses import LOG_CLAMP
from .models import ModelHandle, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    optimizer: str = "adam"
    beta_1: float = 0.9
    beta_2: float = 0.999
    adam_epsilon: float = 1e-8
    label_smoothing: float = 0.0
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is supported, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return TrainConfig(**{**self.to_dict(), **overrides})

    @classmethod
    def from_file(cls, path: str | Path, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Read a ``[train]`` INI section whose keys are field names of this class."""
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ArtifactIOError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        if "train" not in parser:
            raise ConfigError(f"config {path} has no [train] section")
        types = {f.name: f.type for f in fields(cls)}
        casts = {"float": float, "int": int, "str": str}
        overrides = {}
        for key, raw in parser["train"].items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in {path}")
            try:
                overrides[key] = casts[types[key]](raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key} in {path}: {raw!r}") from e
        return (base or cls()).updated(**overrides)


@dataclass
class TrainingHistory:
    records: list[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "batch_loss", "seconds")

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"records": self.records}, indent=1))

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            writer.writerows(self.records)

    @classmethod
    def load_json(cls, path: str | Path) -> "TrainingHistory":
        return cls(json.loads(Path(path).read_text())["records"])


def smoothed_cross_entropy(onehot: tf.Tensor, probs: tf.Tensor, eps: float) -> tf.Tensor:
    """Per-sample cross-entropy of ``probs`` against label-smoothed targets."""
    k = tf.cast(tf.shape(onehot)[-1], probs.dtype)
    target = (1.0 - eps) * onehot + eps / k
    return -tf.reduce_sum(target * tf.math.log(tf.maximum(probs, LOG_CLAMP)), axis=-1)


def _evaluate(head: keras.Model, feats: np.ndarray, onehot: np.ndarray, eps: float, batch_size: int):
    losses, correct = [], 0
    for i in range(0, len(feats), batch_size):
        probs = head(feats[i:i + batch_size], training=False)
        y = onehot[i:i + batch_size]
        losses.append(smoothed_cross_entropy(tf.constant(y), probs, eps).numpy())
        correct += int(np.sum(np.argmax(probs, axis=1) == np.argmax(y, axis=1)))
    return float(np.mean(np.concatenate(losses))), correct / len(feats)


def train(handle: ModelHandle, x_train: np.ndarray, y_train, x_val: np.ndarray | None, y_val,
          cfg: TrainConfig, checkpoint_dir: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainingHistory:
    """Train the head of ``handle`` on normalized images and integer labels.

    Every epoch reshuffles with a generator seeded by ``(cfg.seed, epoch)``.
    Losses and accuracies in the history are full-pass, inference-mode numbers;
    ``batch_loss`` is the mean minibatch loss seen by the optimizer.
    """
    if len(x_train) == 0:
        raise DataError("training set is empty")
    k = handle.head_spec.num_classes
    y_train = np.asarray(y_train)
    if y_train.max() >= k:
        raise ConfigError(f"labels reach {int(y_train.max())} but the head has {k} outputs")
    onehot_train = encode_labels(y_train, k)
    history = TrainingHistory()

    if cfg.epochs > 0:
        feats_train = handle.features(x_train).astype(np.float32)
        has_val = x_val is not None and len(x_val) > 0
        if has_val:
            feats_val = handle.features(x_val).astype(np.float32)
            onehot_val = encode_labels(y_val, k)

        head = handle.head
        optimizer = keras.optimizers.Adam(learning_rate=cfg.learning_rate, beta_1=cfg.beta_1,
                                          beta_2=cfg.beta_2, epsilon=cfg.adam_epsilon)
        eps = cfg.label_smoothing

        @tf.function(reduce_retracing=True)
        def step(xb, yb):
            with tf.GradientTape() as tape:
                loss = tf.reduce_mean(smoothed_cross_entropy(yb, head(xb, training=True), eps))
            grads = tape.gradient(loss, head.trainable_weights)
            optimizer.apply_gradients(zip(grads, head.trainable_weights))
            return loss

        n = len(feats_train)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            batch_losses = []
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                loss = float(step(tf.constant(feats_train[idx]), tf.constant(onehot_train[idx])))
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
                batch_losses.append(loss)
            train_loss, train_acc = _evaluate(head, feats_train, onehot_train, eps, cfg.batch_size)
            if not math.isfinite(train_loss):
                raise NumericError(f"non-finite loss {train_loss} at epoch {epoch}, full training-set pass")
            val_loss, val_acc = (_evaluate(head, feats_val, onehot_val, eps, cfg.batch_size)
                                 if has_val else (float("nan"), float("nan")))
            record = {
                "epoch": epoch,
                "train_loss": train_loss,
                "train_accuracy": train_acc,
                "val_loss": val_loss,
                "val_accuracy": val_acc,
                "batch_loss": float(np.mean(batch_losses)),
                "seconds": time.perf_counter() - t0,
            }
            history.records.append(record)
            log.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                     epoch, train_loss, train_acc, val_loss, val_acc)
            if on_epoch is not None:
                on_epoch(record)

    if checkpoint_dir is not None:
        save_checkpoint(handle, checkpoint_dir)
    return history


def dropout_sweep(build: Callable[[float], ModelHandle], x_train, y_train, x_val, y_val, cfg: TrainConfig,
                  rates: Iterable[float] = (0.4, 0.5, 0.6)) -> dict[float, TrainingHistory]:
    """Train one fresh model per dropout rate. ``build(rate)`` must return an untrained handle."""
    return {rate: train(build(rate), x_train, y_train, x_val, y_val, cfg.updated(dropout_rate=rate))
            for rate in rates}
