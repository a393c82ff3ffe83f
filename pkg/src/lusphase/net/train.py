"""Cross-entropy training with ADAM."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericDivergenceError, ShapeError
from .layers import cross_entropy
from .model import Model


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list, repr=False)
    v: list[np.ndarray] = field(default_factory=list, repr=False)

    def apply(self, params) -> None:
        if not self.m:
            self.m = [np.zeros_like(t.data) for _, t in params]
            self.v = [np.zeros_like(t.data) for _, t in params]
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.step
        corr2 = 1.0 - b2 ** self.step
        for (_, t), m, v in zip(params, self.m, self.v):
            g = t.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            t.data -= update.astype(t.data.dtype, copy=False)


def train_step(model: Model, batch, labels, opt: AdamState) -> float:
    """One forward/backward pass plus an ADAM update; returns the mean loss."""
    return train_step_with_logits(model, batch, labels, opt)[0]


def train_step_with_logits(model: Model, batch, labels, opt: AdamState) -> tuple[float, np.ndarray]:
    """As :func:`train_step`, also returning the pre-update logits."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any((labels != 0) & (labels != 1)):
        raise ShapeError("labels must be a 1-D array of class ids in {0, 1}")
    model.set_training(True)
    model.zero_grad()
    logits = model.forward(batch)
    loss, grad = cross_entropy(np.asarray(logits, dtype=np.float64), labels)
    if not math.isfinite(loss):
        raise NumericDivergenceError(opt.step, loss)
    model.backward(grad.astype(model.dtype, copy=False))
    opt.apply(model.params())
    return loss, logits
