"""COCO-style detection metrics, complexity accounting and the throughput protocol."""

from __future__ import annotations

import csv
import io
import math
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from .boxes import iou
from .errors import ConfigurationError
from .tensor import Tensor

__all__ = [
    "IOU_THRESHOLDS",
    "iou",
    "average_precision",
    "map_coco",
    "evaluate",
    "param_count",
    "flops",
    "measure_fps",
    "ThroughputResult",
    "EvalReport",
]

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = tuple(k / 100 for k in range(101))


def _match(detections, ground_truth, iou_threshold, class_id):
    """Greedy confidence-ordered one-to-one matching; returns (tp flags, number of GT)."""
    gts = [[b for c, b in img if c == class_id] for img in ground_truth]
    npos = sum(len(g) for g in gts)
    flat = []
    k = 0
    for img, ds in enumerate(detections):
        for d in ds:
            if d.class_id == class_id:
                flat.append((d.confidence, k, img, d.box))
            k += 1
    flat.sort(key=lambda t: (-t[0], t[1]))  # ties: detection index
    used = [[False] * len(g) for g in gts]
    tp = []
    for _, _, img, box in flat:
        best, best_j = -1.0, -1
        for j, gbox in enumerate(gts[img] if img < len(gts) else ()):
            if used[img][j]:
                continue
            o = iou(box, gbox)
            if o >= iou_threshold and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
        tp.append(best_j >= 0)
    return np.array(tp, dtype=bool), npos


def average_precision(detections, ground_truth, iou_threshold: float, class_id: int,
                      interpolation: str = "101") -> float:
    """AP of one class at one IoU threshold.

    ``detections[i]`` lists :class:`~attrprune.boxes.Detection` objects for image
    ``i``; ``ground_truth[i]`` lists ``(class_id, box)`` pairs.  Returns NaN when the
    class has no ground truth anywhere (the caller drops it from the mean).
    ``interpolation`` is ``"101"`` (COCO) or ``"all"`` (every recall step).
    """
    if interpolation not in ("101", "all"):
        raise ConfigurationError(f"interpolation must be '101' or 'all', got {interpolation!r}")
    tp, npos = _match(detections, ground_truth, iou_threshold, class_id)
    if npos == 0:
        return math.nan
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "101":
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        return float(sum(envelope[i] for i in idx if i < len(envelope)) / len(RECALL_POINTS))
    steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(steps * envelope))


def ap_grid(detections, ground_truth, classes: int, interpolation: str = "101") -> np.ndarray:
    """AP for every (threshold, class) pair, shape ``[10, classes]`` (NaN = no GT)."""
    return np.array([[average_precision(detections, ground_truth, t, c, interpolation)
                      for c in range(classes)] for t in IOU_THRESHOLDS])


def map_coco(detections, ground_truth, classes: int, interpolation: str = "101") -> tuple:
    """(mAP@.50, mAP@[.50:.95]); classes without ground truth are excluded."""
    grid = ap_grid(detections, ground_truth, classes, interpolation)
    present = ~np.isnan(grid[0])
    if not present.any():
        return 0.0, 0.0
    per_threshold = grid[:, present].mean(axis=1)
    return float(per_threshold[0]), float(per_threshold.mean())


def evaluate(model, scenes, conf_threshold: float = 0.05, batch_size: int = 64,
             interpolation: str = "101") -> tuple:
    images = np.stack([s.image for s in scenes])
    head = G.predict(model, images, batch_size)
    dets = G.decode(head, conf_threshold)
    return map_coco(dets, [s.objects for s in scenes], model.meta["classes"], interpolation)


# ---------------------------------------------------------------- complexity


def param_count(model) -> int:
    return int(sum(p.size for _, p in model.parameters()))


def layer_shapes(model, input_shape=None) -> dict:
    """Per-sample output shape of every node (evaluated once on zeros)."""
    shape = tuple(input_shape or model.meta["input_shape"])
    x = Tensor._wrap(np.zeros((1,) + shape))
    values, shapes = {}, {}
    for node in model.nodes:
        out = G._eval_node(node, x, [values[s] for s in node.inputs])
        values[node.id] = out
        shapes[node.id] = out.shape[1:]
    return shapes


def flops(model, input_shape=None) -> int:
    """Per-sample theoretical FLOPs, multiply-add counted as 2 operations.

    conv: 2*kh*kw*(Cin/groups)*Cout*H'*W' (bias adds not counted); dense: 2*in*out;
    relu / pool / residual add: one per output element.
    """
    shapes = layer_shapes(model, input_shape)
    total = 0
    for node in model.nodes:
        out = shapes[node.id]
        if node.kind == "conv":
            cout, cin_g, kh, kw = node.params["weight"].shape
            total += 2 * kh * kw * cin_g * cout * out[1] * out[2]
        elif node.kind == "dense":
            o, i = node.params["weight"].shape
            total += 2 * i * o
        elif node.kind in ("relu", "pool", "residual-add"):
            total += int(np.prod(out))
    return int(total)


# ---------------------------------------------------------------- throughput


@dataclass
class ThroughputResult:
    fps: float
    passes: int
    warmup: int
    batch: int
    total_seconds: float
    pass_mean_s: float
    pass_std_s: float
    fps_ci95: float  # half-width of the 95% interval on fps

    @property
    def relative_ci95(self) -> float:
        return self.fps_ci95 / self.fps


def measure_fps(model, input_shape=None, passes: int = 100, warmup: int = 10, batch: int = 1,
                seed: int = 0, forward_fn=None, clock=time.perf_counter) -> ThroughputResult:
    """Time ``passes`` forwards after ``warmup`` untimed ones; fps = passes*batch / seconds."""
    if passes < 1 or warmup < 0 or batch < 1:
        raise ConfigurationError(f"need passes >= 1, warmup >= 0, batch >= 1 (got {passes}, {warmup}, {batch})")
    shape = tuple(input_shape or model.meta["input_shape"])
    x = Tensor._wrap(np.random.default_rng(seed).uniform(0.0, 1.0, (batch,) + shape))
    run = forward_fn or (lambda m, inp: G.forward(m, inp))
    for _ in range(warmup):
        run(model, x)
    times = np.empty(passes)
    prev = clock()
    for k in range(passes):
        run(model, x)
        now = clock()
        times[k] = now - prev
        prev = now
    total = float(times.sum())
    mean = total / passes
    std = float(times.std(ddof=1)) if passes > 1 else 0.0
    fps = passes * batch / total
    ci = 1.96 * std / math.sqrt(passes) * batch / mean**2 if passes > 1 else math.inf
    return ThroughputResult(fps, passes, warmup, batch, total, mean, std, ci)


def hardware_stanza() -> dict:
    return {"machine": platform.machine(), "processor": platform.processor() or "unknown",
            "python": platform.python_version(), "numpy": np.__version__, "device": "cpu"}


# ---------------------------------------------------------------- reports

TABLE_COLUMNS = ("Model Architecture", "Method", "mAP@[.50:.95]", "mAP@.50", "FPS",
                 "% Δ mAP", "% Δ FPS", "Params", "FLOPs")


def percent_change(x: float, base: float) -> float:
    if base == 0:
        return 0.0 if x == 0 else math.copysign(math.inf, x)
    return 100.0 * (x - base) / base


@dataclass
class EvalReport:
    model: str
    method: str
    map_50: float
    map_50_95: float
    fps: float
    params: int
    flops: int
    deltas: dict | None = None  # {"map": %, "fps": %} vs baseline; None for the baseline itself
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.map_50 < self.map_50_95 - 1e-12:
            raise ConfigurationError(f"mAP@.50 ({self.map_50}) < mAP@[.50:.95] ({self.map_50_95})")

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def against(self, baseline: "EvalReport") -> "EvalReport":
        deltas = {"map": percent_change(self.map_50_95, baseline.map_50_95),
                  "fps": percent_change(self.fps, baseline.fps)}
        return EvalReport(self.model, self.method, self.map_50, self.map_50_95, self.fps,
                          self.params, self.flops, deltas, dict(self.info))

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["gflops"] = self.gflops
        rec["flop_convention"] = "multiply-add = 2 FLOPs"
        return rec

    def to_row(self) -> list:
        d = self.deltas or {}
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [self.model, self.method, repr(self.map_50_95), repr(self.map_50), repr(self.fps),
                fmt(d.get("map")), fmt(d.get("fps")), str(self.params), str(self.flops)]

    @classmethod
    def from_row(cls, row) -> "EvalReport":
        row = dict(zip(TABLE_COLUMNS, row)) if not isinstance(row, dict) else row
        dm, df = row["% Δ mAP"], row["% Δ FPS"]
        deltas = None if dm == "" and df == "" else {"map": float(dm), "fps": float(df)}
        return cls(row["Model Architecture"], row["Method"], float(row["mAP@.50"]),
                   float(row["mAP@[.50:.95]"]), float(row["FPS"]), int(row["Params"]),
                   int(row["FLOPs"]), deltas)


def write_table(reports, delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in reports:
        w.writerow(r.to_row())
    return buf.getvalue()


def read_table(text: str, delimiter: str = ",") -> list:
    """Parse :func:`write_table` output; leading ``#`` provenance lines are skipped."""
    lines = [ln for ln in text.splitlines(keepends=True) if not ln.startswith("#")]
    rows = list(csv.reader(lines, delimiter=delimiter))
    if not rows or tuple(rows[0]) != TABLE_COLUMNS:
        raise ConfigurationError(f"table header {rows[0] if rows else None} != {TABLE_COLUMNS}")
    return [EvalReport.from_row(r) for r in rows[1:]]
