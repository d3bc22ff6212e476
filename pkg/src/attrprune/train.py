"""Seeded stochastic gradient descent for the toy detectors."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import tensor as T
from .dataset import stack
from .errors import NumericError
from .graph import detection_loss, forward

log = logging.getLogger(__name__)


def sgd_step(model, lr: float, clip_norm: float | None = None) -> float:
    params = [p for _, p in model.parameters() if p.requires_grad and p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    for p in params:
        p.data -= (lr * scale) * p.grad
        p.grad = None
    return norm


def train(model, scenes, epochs: int = 20, lr: float = 0.05, batch_size: int = 32, seed: int = 0,
          clip_norm: float | None = 10.0, lr_decay_epochs=()) -> list:
    """Train ``model`` in place; returns one loss record per epoch.

    Each epoch visits the scenes in a seeded permutation.  The learning rate is
    divided by 10 at each epoch listed in ``lr_decay_epochs``.
    """
    grid, classes = model.meta["grid"], model.meta["classes"]
    images, targets = stack(scenes, grid, classes)
    rng = np.random.default_rng(seed)
    history = []
    rate = lr
    for epoch in range(epochs):
        if epoch in set(lr_decay_epochs):
            rate /= 10.0
        order = rng.permutation(len(scenes))
        totals = {"loss": 0.0, "objectness": 0.0, "class": 0.0, "box": 0.0}
        steps = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            with T.Tape():
                head, _ = forward(model, images[idx])
                loss = detection_loss(head, targets[idx])
                if not math.isfinite(loss.scalar):
                    raise NumericError(f"non-finite training loss at epoch {epoch}", loss.components)
                T.backward(loss)
            sgd_step(model, rate, clip_norm)
            totals["loss"] += loss.scalar
            for k, v in loss.components.items():
                totals[k] += v
            steps += 1
        record = {"epoch": epoch + 1, "lr": rate, **{k: v / steps for k, v in totals.items()}}
        history.append(record)
        log.info("epoch %d loss %.4f (obj %.4f cls %.4f box %.4f)", record["epoch"], record["loss"],
                 record["objectness"], record["class"], record["box"])
    return history
