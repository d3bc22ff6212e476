"""SVG figures for sweep, rank comparison and training curves.

Output is byte-stable: the SVG id salt is fixed and no creation date is written.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "attrprune",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (5.0, 3.4),
}
METHOD_STYLE = {"l1": ("tab:blue", "o", "L1"), "attribution": ("tab:orange", "s", "Attribution")}


def _save(fig, path, description: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None, "Creator": "attrprune",
            "Description": json.dumps(description, sort_keys=True)}
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
    return path


def plot_sweep(sweep: dict, path, description: dict) -> Path:
    """mAP@[.50:.95] drop (%) against pruning rate, one line per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method, points in sweep["methods"].items():
            color, marker, label = METHOD_STYLE.get(method, ("k", "x", method))
            rates = [100 * p["rate"] for p in points]
            drops = [p["map_drop_percent"] for p in points]
            ax.plot(rates, drops, color=color, marker=marker, label=label)
        ax.set_xlabel("pruning rate (%)")
        ax.set_ylabel("mAP@[.50:.95] drop (%)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, description)


def plot_ranks(comparison: dict, path, description: dict) -> Path:
    """Per-layer rank under each criterion (rank 1 = pruned first)."""
    layers = comparison["layers"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5.0, 0.45 * len(layers)), 3.6))
        x = range(len(layers))
        ax.plot(x, [r["rank_a"] for r in layers], "o-", color="tab:blue", label="L1")
        ax.plot(x, [r["rank_b"] for r in layers], "s-", color="tab:orange", label="Attribution")
        ax.set_xticks(list(x))
        ax.set_xticklabels([r["id"] for r in layers], rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("rank (1 = least important)")
        ax.set_title(f"Spearman {comparison['spearman']:.3f}, "
                     f"bottom-{comparison['k']} overlap {comparison['bottom_k_overlap']:.2f}")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, description)


def plot_loss(history: list, path, description: dict) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [h["epoch"] for h in history]
        for key in ("loss", "objectness", "class", "box"):
            ax.plot(epochs, [h[key] for h in history], label=key, lw=2 if key == "loss" else 1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean batch loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, description)
