"""Select the least important layers and deactivate them by zeroing weight and bias."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PlanMismatchError
from .graph import ModelGraph


@dataclass(frozen=True)
class PrunePlan:
    rate: float
    method: str
    pruned: tuple  # ordered layer ids, least important first
    exempt: tuple = field(default=())

    @property
    def prune_count(self) -> int:
        return len(self.pruned)

    @classmethod
    def empty(cls, method: str, exempt=()) -> "PrunePlan":
        """The rate-0 baseline: nothing is pruned."""
        return cls(0.0, method, (), tuple(exempt))

    def to_record(self) -> dict:
        return {"method": self.method, "rate": self.rate, "prune_count": self.prune_count,
                "pruned": list(self.pruned), "exempt": list(self.exempt)}

    @classmethod
    def from_record(cls, rec: dict) -> "PrunePlan":
        return cls(float(rec["rate"]), rec["method"], tuple(rec["pruned"]), tuple(rec.get("exempt", ())))


def prune_count(rate: float, eligible: int) -> int:
    return max(1, math.floor(rate * eligible))


def make_plan(table, rate: float, exempt=()) -> PrunePlan:
    """Bottom ``max(1, floor(rate * eligible))`` layers of the table's ranking."""
    if not 0.0 < rate < 1.0:
        raise ConfigurationError(f"prune rate must lie in (0, 1), got {rate}")
    exempt = tuple(exempt)
    eligible = [lid for lid in table.ranking if lid not in set(exempt)]
    if not eligible:
        raise ConfigurationError("every prunable layer is exempt; nothing to rank")
    k = prune_count(rate, len(eligible))
    return PrunePlan(rate, table.method, tuple(eligible[:k]), exempt)


def apply_plan(model: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """A copy of ``model`` with the planned layers' weight and bias set to exactly zero."""
    unknown = [lid for lid in plan.pruned if lid not in model]
    if unknown:
        raise PlanMismatchError(f"plan names layers missing from the model: {unknown}")
    not_prunable = [lid for lid in plan.pruned if not model.node(lid).prunable]
    if not_prunable:
        raise PlanMismatchError(f"plan names non-prunable layers: {not_prunable}")
    pruned = model.copy()
    for lid in plan.pruned:
        for p in pruned.node(lid).params.values():
            p.data = np.zeros_like(p.data)
    return pruned


def plan_diff(a: PrunePlan, b: PrunePlan) -> set:
    return set(a.pruned) ^ set(b.pruned)
