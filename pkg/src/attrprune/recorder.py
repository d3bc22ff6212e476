"""Capture conv activations and their loss gradients in one forward/backward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import write_container
from .errors import InputError, NumericError
from .graph import ModelGraph, forward, loss_terms


@dataclass(frozen=True)
class LayerAttribution:
    layer_id: str
    activation: np.ndarray  # [N, C, H, W] copy of the conv output
    act_grad: np.ndarray  # d loss / d activation, same shape
    batch_size: int

    def __post_init__(self):
        if self.activation.shape != self.act_grad.shape:
            raise ValueError(f"{self.layer_id}: activation {self.activation.shape} vs grad {self.act_grad.shape}")


def record_pass(model: ModelGraph, batch, targets, component: str | None = None,
                loss_scale: float = 1.0, layers=None) -> dict:
    """Snapshots for every prunable layer (or the given ``layers``), keyed by layer id.

    The loss is the per-image sum of the detection loss, so each image's
    activation gradient is the gradient of that image's own loss.  ``component``
    restricts the loss to one of ``objectness`` / ``class`` / ``box``.

    The model is evaluated through fresh leaf tensors sharing its parameter
    storage: parameters and their gradient slots are never touched.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise InputError(f"record_pass needs a non-empty [N, C, H, W] batch, got shape {batch.shape}")
    layer_ids = list(layers) if layers is not None else model.prunable_ids
    view = model.shared_view(requires_grad=True)

    with T.Tape():
        head, convs = forward(view, batch, retain_grad=True)
        terms = loss_terms(head, targets, reduction="sum")
        values = {k: v.item() for k, v in terms.items()}
        if component is None:
            loss = T.add(T.add(terms["objectness"], terms["class"]), terms["box"])
        else:
            loss = terms[component]
        if loss_scale != 1.0:
            loss = T.mul(loss, loss_scale)
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite loss {loss.item()} while recording", values)
        T.backward(loss)

    out = {}
    for lid in layer_ids:
        act = convs[lid]
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
        out[lid] = LayerAttribution(lid, act.data.copy(), np.array(grad, copy=True), batch.shape[0])
    return out


def dump(records: dict, directory) -> list:
    """Write one container per layer holding ``activation`` and ``act_grad``."""
    directory = Path(directory)
    paths = []
    for lid, rec in records.items():
        path = directory / f"{lid}.zip"
        write_container(path, {"format": "attrprune-attribution", "layer_id": lid, "batch_size": rec.batch_size},
                        {"activation": rec.activation, "act_grad": rec.act_grad})
        paths.append(path)
    return paths
