"""Cross-entropy loss, SGD with momentum and weight decay, step learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

# Learning rates reported for the four benchmark networks; schedules are ours.
LR_PRESETS = {"alexnet": 0.01, "vgg16": 0.01, "resnet32": 0.5, "resnet110": 0.3}
WEIGHT_DECAY_PRESETS = {"vgg16": 1e-4, "resnet": 5e-4}


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent expects logits (B, C) and labels (B,), got {logits.shape} and {labels.shape}")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ConfigError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(B)
    loss = float(-logp[rows, labels].mean())
    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    return loss, delta / B


def no_decay(name: str | None) -> bool:
    """BatchNorm scale/shift and biases are exempt from weight decay."""
    return bool(name) and name.rsplit(".", 1)[-1] in ("gamma", "beta", "bias")


@dataclass
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

    ``g' = g + wd * w;  v <- m * v + g';  w <- w - lr * v``
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_all: bool = False
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("momentum and weight decay must be non-negative")

    def step(self, params: Sequence, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        """Update ``params`` (tensors with a ``data`` array) in place of their ``data`` attribute."""
        lr = self.lr if lr is None else lr
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
        for p, g in zip(params, grads):
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {getattr(p, 'name', '')} {p.data.shape}")
            w = p.data
            if self.weight_decay and (self.decay_all or not no_decay(getattr(p, "name", None))):
                g = g + self.weight_decay * w
            v = self.velocity.get(id(p))
            v = g.astype(w.dtype, copy=True) if v is None else (self.momentum * v + g).astype(w.dtype, copy=False)
            self.velocity[id(p)] = v
            # Rebind rather than mutate: tensors are immutable once written.
            p.data = w - lr * v


def sgd_step(state: SGD, params, grads, lr: float | None = None):
    state.step(params, grads, lr)
    return params


@dataclass(frozen=True)
class LRSchedule:
    base: float
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        if self.base <= 0 or not 0 < self.factor <= 1:
            raise ConfigError("schedule needs base > 0 and 0 < factor <= 1")
        object.__setattr__(self, "milestones", tuple(sorted(int(m) for m in self.milestones)))

    def at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.base * self.factor ** passed


def lr_at(schedule: LRSchedule, epoch: int) -> float:
    return schedule.at(epoch)
