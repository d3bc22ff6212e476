"""Layer importance: weight-magnitude (L1) and gradient x activation attribution."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import stack
from .errors import ConfigurationError, InputError, NumericError
from .recorder import record_pass

METHODS = ("l1", "attribution")


@dataclass
class ImportanceTable:
    method: str
    scores: dict  # layer id -> non-negative score
    order: dict  # layer id -> topological index (deeper = larger)
    samples_used: int | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if set(self.scores) != set(self.order):
            raise ConfigurationError("scores and topological order cover different layers")
        bad = [k for k, v in self.scores.items() if not v >= 0]
        if bad:
            raise NumericError(f"negative or NaN importance for layers {bad}")

    @property
    def ranking(self) -> list:
        """Layer ids from least to most important; ties put the deeper layer first."""
        return sorted(self.scores, key=lambda k: (self.scores[k], -self.order[k]))

    def rank_of(self, layer_id: str) -> int:
        return self.ranking.index(layer_id) + 1

    def to_record(self) -> dict:
        rank = {lid: i + 1 for i, lid in enumerate(self.ranking)}
        return {
            "method": self.method,
            "samples_used": self.samples_used,
            "notes": self.notes,
            "layers": [{"id": lid, "method": self.method, "score": self.scores[lid], "rank": rank[lid],
                        "topo_index": self.order[lid]} for lid in self.ranking],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ImportanceTable":
        layers = rec["layers"]
        return cls(rec["method"], {r["id"]: float(r["score"]) for r in layers},
                   {r["id"]: int(r["topo_index"]) for r in layers}, rec.get("samples_used"),
                   rec.get("notes", {}))


def save_table(table: ImportanceTable, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rec = dict(extra or {})
    rec["table"] = table.to_record()
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    return path


def load_table(path) -> ImportanceTable:
    rec = json.loads(Path(path).read_text())
    return ImportanceTable.from_record(rec["table"] if "table" in rec else rec)


def _prunable(model) -> list:
    ids = model.prunable_ids
    if not ids:
        raise ConfigurationError(f"model {model.meta.get('name', '?')} has no prunable layers")
    return ids


def l1_score(model, include_bias: bool = False) -> ImportanceTable:
    """Sum of absolute kernel weights per prunable layer (no data, no forward pass)."""
    ids = _prunable(model)
    scores = {}
    for lid in ids:
        node = model.node(lid)
        s = float(np.abs(node.params["weight"].data).sum())
        if include_bias and "bias" in node.params:
            s += float(np.abs(node.params["bias"].data).sum())
        scores[lid] = s
    return ImportanceTable("l1", scores, {lid: model.index(lid) for lid in ids},
                           notes={"include_bias": include_bias})


def select_samples(n_available: int, batches: int, batch_size: int, seed: int) -> np.ndarray:
    need = batches * batch_size
    if batches < 1 or batch_size < 1:
        raise ConfigurationError(f"need batches >= 1 and batch_size >= 1, got {batches}, {batch_size}")
    if n_available < need:
        raise InputError(f"attribution needs {need} samples, dataset has {n_available}")
    return np.random.default_rng(seed).permutation(n_available)[:need]


def per_example_attribution(rec) -> np.ndarray:
    """sum_i |grad_i * act_i| for each image of one recorded layer."""
    return np.abs(rec.act_grad * rec.activation).reshape(rec.batch_size, -1).sum(axis=1)


def attribution_score(model, dataset, batches: int = 1, batch_size: int = 32, seed: int = 0,
                      component: str | None = None, loss_scale: float = 1.0) -> ImportanceTable:
    """Mean over sampled images of sum_i |dL/dA_i * A_i| for every prunable layer.

    Samples are drawn from ``dataset`` (a list of scenes) by a seeded permutation
    and recorded batch by batch.  Per-image sums are combined with ``math.fsum``,
    which is exactly rounded, so the mean does not depend on sample order.
    """
    ids = _prunable(model)
    picked = select_samples(len(dataset), batches, batch_size, seed)
    grid, classes = model.meta["grid"], model.meta["classes"]
    per_example = {lid: [] for lid in ids}
    for b in range(batches):
        chunk = [dataset[i] for i in picked[b * batch_size:(b + 1) * batch_size]]
        images, targets = stack(chunk, grid, classes)
        records = record_pass(model, images, targets, component=component, loss_scale=loss_scale)
        for lid in ids:
            per_example[lid].extend(per_example_attribution(records[lid]).tolist())
    n = batches * batch_size
    scores = {}
    for lid in ids:
        s = math.fsum(per_example[lid]) / n
        if not math.isfinite(s):
            raise NumericError(f"non-finite attribution score for layer {lid}")
        scores[lid] = s
    notes = {"batches": batches, "batch_size": batch_size, "seed": seed,
             "component": component or "sum", "loss_reduction": "per-image sum"}
    return ImportanceTable("attribution", scores, {lid: model.index(lid) for lid in ids}, n, notes)


@dataclass
class RankComparison:
    layers: list
    ranks_a: dict
    ranks_b: dict
    spearman: float
    k: int
    bottom_a: list
    bottom_b: list
    overlap: float

    def to_record(self) -> dict:
        return {
            "spearman": self.spearman, "k": self.k, "bottom_k_overlap": self.overlap,
            "bottom_a": self.bottom_a, "bottom_b": self.bottom_b,
            "layers": [{"id": lid, "rank_a": self.ranks_a[lid], "rank_b": self.ranks_b[lid]} for lid in self.layers],
        }


def compare_rankings(a: ImportanceTable, b: ImportanceTable, k: int = 1) -> RankComparison:
    if set(a.scores) != set(b.scores):
        raise ConfigurationError("tables rank different layer sets")
    n = len(a.scores)
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must be in [1, {n}], got {k}")
    ra = {lid: i + 1 for i, lid in enumerate(a.ranking)}
    rb = {lid: i + 1 for i, lid in enumerate(b.ranking)}
    layers = sorted(a.scores, key=lambda lid: a.order[lid])
    if n < 2:
        rho = 1.0
    else:
        d2 = sum((ra[lid] - rb[lid]) ** 2 for lid in layers)
        rho = 1.0 - 6.0 * d2 / (n * (n * n - 1))
    bottom_a, bottom_b = a.ranking[:k], b.ranking[:k]
    overlap = len(set(bottom_a) & set(bottom_b)) / k
    return RankComparison(layers, ra, rb, rho, k, bottom_a, bottom_b, overlap)
