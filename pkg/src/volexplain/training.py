"""Plain SGD training with a step learning-rate schedule, and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import core
from .errors import LabelError, ShapeError, TrainingError
from .model import Network, backward, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    The defaults are 1e-4 learning rate, multiplied by 0.1 after every
    7 epochs, batches of 16. ``l2`` is an optional true weight-decay
    coefficient applied to kernels/weights (biases excluded); it is off by
    default.
    """

    epochs: int = 1
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.1
    decay_period_epochs: int = 7
    batch_size: int = 16
    rng_seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.decay_period_epochs < 1 or self.batch_size < 1:
            raise ValueError("decay_period_epochs and batch_size must be positive")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.learning_rate * self.lr_decay_factor ** ((epoch - 1) // self.decay_period_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    learning_rate: float
    loss: float
    accuracy: float


def _check_dataset(net: Network, x, y):
    x = core.as_tensor(x, "volumes")
    if x.shape[1:] != net.spec.input_shape:
        raise ShapeError(f"volumes have shape {x.shape[1:]}, network expects {net.spec.input_shape}")
    y = np.asarray(y)
    if y.shape != (x.shape[0],) or not np.issubdtype(y.dtype, np.integer):
        raise LabelError(f"labels must be {x.shape[0]} integers, got shape {y.shape} dtype {y.dtype}")
    if x.shape[0] == 0:
        raise ValueError("dataset is empty")
    k = net.spec.num_classes
    if y.min() < 0 or y.max() >= k:
        raise LabelError(f"labels must lie in [0, {k})")
    return x, y.astype(np.int64)


def train(net: Network, x, y, cfg: TrainConfig) -> tuple[Network, list[EpochMetrics]]:
    """Mini-batch SGD on mean cross-entropy.

    Each epoch draws a fresh permutation from a generator seeded once with
    ``cfg.rng_seed``; the final partial batch is kept. Reported loss and
    accuracy are sample-weighted averages of the pre-update batch values.
    """
    x, y = _check_dataset(net, x, y)
    n = x.shape[0]
    if cfg.batch_size > n:
        raise TrainingError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")

    params = [{k: v.copy() for k, v in p.items()} for p in net.params]
    rng = np.random.default_rng(cfg.rng_seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for bstart in range(0, n, cfg.batch_size):
            idx = order[bstart : bstart + cfg.batch_size]
            current = Network(net.spec, params)
            z, trace = forward(current, x[idx])
            loss, grad = core.cross_entropy(core.softmax(z), y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting at {bstart}")
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(z, axis=1) == y[idx]))
            _, grads = backward(current, trace, grad)
            with np.errstate(over="ignore", invalid="ignore"):
                for li, (p, g) in enumerate(zip(params, grads)):
                    for name, gv in g.items():
                        if cfg.l2 and name != "bias":
                            gv = gv + cfg.l2 * p[name]
                        p[name] -= lr * gv
                        if not np.all(np.isfinite(p[name])):
                            raise TrainingError(
                                f"layer {li} {name} diverged at epoch {epoch}, batch starting at {bstart} (lr {lr:g})"
                            )
        m = EpochMetrics(epoch, lr, total_loss / n, correct / n)
        log.info("epoch %d lr %.3g loss %.6f acc %.4f", m.epoch, m.learning_rate, m.loss, m.accuracy)
        history.append(m)
    return Network(net.spec, params), history


def evaluate(net: Network, x, y) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    x, y = _check_dataset(net, x, y)
    k = net.spec.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    z, _ = forward(net, x)
    pred = np.argmax(z, axis=1)
    np.add.at(confusion, (y, pred), 1)
    return float(np.trace(confusion) / confusion.sum()), confusion
