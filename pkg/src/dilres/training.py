"""Softmax, sparse categorical cross-entropy, SGD with momentum, and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .metrics import confusion, report
from .rng import stream

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """Loss or logits became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    width: float = 1.0
    class_weights: list[float] | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def softmax(logits):
    """Row-wise softmax with max subtraction; rows sum to 1."""
    s = np.asarray(logits)
    if np.isnan(s).any():
        raise ValueError("softmax input contains NaN")
    s64 = s.astype(np.float64)
    z = np.exp(s64 - s64.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def scce_loss(probabilities, labels):
    """Mean over the batch of -log p(label), with the log argument floored at 1e-12."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ValueError(f"expected (N, C) probabilities and N labels, got {p.shape} and {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")
    picked = p[np.arange(p.shape[0]), y]
    return float(np.mean(-np.log(np.maximum(picked, LOG_FLOOR))))


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], config: TrainConfig,
             state: SGDState | None = None) -> SGDState:
    """In-place momentum update: v <- mu*v + g + wd*theta; theta <- theta - lr*v."""
    state = state or SGDState()
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(theta.shape, dtype=np.float64)
        v = config.momentum * v + g.astype(np.float64) + config.weight_decay * theta.astype(np.float64)
        state.velocity[name] = v
        theta[...] = (theta.astype(np.float64) - config.learning_rate * v).astype(theta.dtype)
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_macro_f1: float


def predict(net, images, batch_size=64):
    """Argmax class per image in inference mode (ties go to the lowest index)."""
    from .resnet import forward

    out = []
    for i in range(0, len(images), batch_size):
        logits = forward(net, images[i:i + batch_size], mode="infer").logits
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_step(net, images, labels, config: TrainConfig, state: SGDState):
    from .resnet import forward_on_tape

    tape = ad.Tape()
    params = net.tape_params(tape)
    x = tape.constant(images)
    logits, _ = forward_on_tape(net, tape, params, x, mode="train")
    loss = ad.softmax_cross_entropy(logits, labels, config.class_weights)
    value = float(loss.value[0])
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    grads = tape.backward(loss)
    state = sgd_step(net.params, grads, config, state)
    return value, state


def train(net, images, labels, config: TrainConfig, val_images=None, val_labels=None,
          callback=None) -> list[EpochRecord]:
    """Mini-batch SGD over seeded shuffles. Returns one record per epoch.

    Validation metrics use ``val_images``/``val_labels`` when given, otherwise
    the training data in inference mode.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if labels.min() < 0 or labels.max() >= net.class_count:
        raise ValueError(f"labels must lie in [0, {net.class_count})")
    if val_images is None:
        val_images, val_labels = images, labels
    rng = stream(config.seed, "shuffle")
    state = SGDState()
    history = []
    n = len(images)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, state = train_step(net, images[idx], labels[idx], config, state)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / n)
        preds = predict(net, val_images)
        rep = report(confusion(val_labels, preds, net.class_count))
        rec = EpochRecord(epoch, train_loss, rep.accuracy, rep.macro_f1)
        log.info("epoch %d loss %.4f val_acc %.4f val_f1 %.4f", epoch, train_loss, rep.accuracy, rep.macro_f1)
        history.append(rec)
        if callback is not None:
            callback(rec)
    return history


HISTORY_COLUMNS = ("epoch", "train_loss", "val_accuracy", "val_macro_f1")


def write_history(history, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_accuracy), repr(r.val_macro_f1)])
