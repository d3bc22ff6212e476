"""Layer graphs, toy single-shot detectors, decoding and the detection loss.

A :class:`ModelGraph` is an ordered list of :class:`LayerNode` objects whose
order is already a valid evaluation order.  Three toy backbones are
provided, mirroring the plain / residual / depthwise-separable paradigms,
each topped by a 1x1 prediction conv and a ``detect-head`` node that lays
the prediction out as ``[N, grid, grid, 5 + classes]``:

    channel 0        objectness logit
    channels 1, 2    center offset logits inside the cell (sigmoid -> [0, 1])
    channels 3, 4    log(w * grid), log(h * grid)
    channels 5..     class logits
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .boxes import Detection, nms
from .container import read_container, write_container
from .errors import ConfigurationError, DimensionError, InputError
from .tensor import LossValue, Tensor

KINDS = ("input", "conv", "dense", "relu", "pool", "residual-add", "detect-head")
PARADIGMS = ("plain", "residual", "depthwise")
BOX_CHANNELS = 5


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    prunable: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.prunable and self.kind != "conv":
            raise ConfigurationError(f"node {self.id}: only conv layers may be prunable")


@dataclass
class ModelGraph:
    nodes: list
    meta: dict

    def __post_init__(self):
        seen = set()
        n_inputs = 0
        for node in self.nodes:
            if node.id in seen:
                raise ConfigurationError(f"duplicate node id {node.id!r}")
            for src in node.inputs:
                if src not in seen:
                    raise ConfigurationError(f"node {node.id!r} reads {src!r} before it is defined")
            n_inputs += node.kind == "input"
            seen.add(node.id)
        if n_inputs != 1:
            raise ConfigurationError(f"graph needs exactly one input node, found {n_inputs}")
        self._index = {n.id: i for i, n in enumerate(self.nodes)}

    def node(self, node_id: str) -> LayerNode:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise KeyError(f"no node {node_id!r} in graph {self.meta.get('name', '?')}") from None

    def __contains__(self, node_id) -> bool:
        return node_id in self._index

    def index(self, node_id: str) -> int:
        return self._index[node_id]

    @property
    def prunable_ids(self) -> list:
        return [n.id for n in self.nodes if n.prunable]

    @property
    def head_conv_ids(self) -> list:
        """Conv nodes feeding a detect-head node directly."""
        return [src for n in self.nodes if n.kind == "detect-head" for src in n.inputs
                if self.node(src).kind == "conv"]

    def parameters(self):
        for node in self.nodes:
            for name in sorted(node.params):
                yield f"{node.id}.{name}", node.params[name]

    def copy(self) -> "ModelGraph":
        nodes = []
        for n in self.nodes:
            params = {}
            for k, p in n.params.items():
                t = Tensor(p.data, requires_grad=p.requires_grad)
                params[k] = t
            nodes.append(LayerNode(n.id, n.kind, list(n.inputs), params, copy.deepcopy(n.attrs), n.prunable))
        return ModelGraph(nodes, copy.deepcopy(self.meta))

    def shared_view(self, requires_grad: bool = True) -> "ModelGraph":
        """Same parameter storage wrapped in fresh leaf tensors (never written by backward)."""
        nodes = []
        for n in self.nodes:
            params = {}
            for k, p in n.params.items():
                t = Tensor._wrap(p.data)
                t.requires_grad = requires_grad
                params[k] = t
            nodes.append(LayerNode(n.id, n.kind, list(n.inputs), params, n.attrs, n.prunable))
        return ModelGraph(nodes, self.meta)

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad = None


class GraphBuilder:
    """Incremental construction of a :class:`ModelGraph`."""

    def __init__(self, input_shape, name="graph", rng=None):
        self.nodes = [LayerNode("input", "input")]
        self.meta = {"name": name, "input_shape": list(input_shape)}
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.shapes = {"input": tuple(input_shape)}
        self.last = "input"

    def _add(self, node: LayerNode, shape) -> str:
        if node.id in self.shapes:
            raise ConfigurationError(f"duplicate node id {node.id!r}")
        self.nodes.append(node)
        self.shapes[node.id] = tuple(shape)
        self.last = node.id
        return node.id

    def conv(self, node_id, cout, kernel=3, stride=1, padding=None, groups=1, src=None,
             prunable=True, weight=None, bias=None):
        src = src or self.last
        cin, h, w = self.shapes[src]
        padding = kernel // 2 if padding is None else padding
        if cin % groups or cout % groups:
            raise ConfigurationError(f"{node_id}: channels {cin}->{cout} not divisible by groups={groups}")
        span_h, span_w = h + 2 * padding - kernel, w + 2 * padding - kernel
        if span_h < 0 or span_h % stride or span_w % stride:
            raise ConfigurationError(f"{node_id}: stride {stride} does not tile a {h}x{w} input")
        fan_in = (cin // groups) * kernel * kernel
        if weight is None:
            weight = self.rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin // groups, kernel, kernel))
        if bias is None:
            bias = np.zeros(cout)
        params = {"weight": Tensor(weight, requires_grad=True), "bias": Tensor(bias, requires_grad=True)}
        node = LayerNode(node_id, "conv", [src], params,
                         {"stride": stride, "padding": padding, "groups": groups}, prunable)
        return self._add(node, (cout, span_h // stride + 1, span_w // stride + 1))

    def dense(self, node_id, out, src=None):
        src = src or self.last
        shape = self.shapes[src]
        if len(shape) != 1:
            raise ConfigurationError(f"{node_id}: dense input must be flat, got {shape}")
        w = self.rng.normal(0.0, math.sqrt(2.0 / shape[0]), (out, shape[0]))
        params = {"weight": Tensor(w, requires_grad=True), "bias": Tensor(np.zeros(out), requires_grad=True)}
        return self._add(LayerNode(node_id, "dense", [src], params), (out,))

    def relu(self, node_id, src=None):
        src = src or self.last
        return self._add(LayerNode(node_id, "relu", [src]), self.shapes[src])

    def pool(self, node_id, size=2, mode="max", src=None):
        src = src or self.last
        c, h, w = self.shapes[src]
        if mode == "global":
            return self._add(LayerNode(node_id, "pool", [src], attrs={"mode": "global"}), (c,))
        if h % size or w % size:
            raise ConfigurationError(f"{node_id}: {h}x{w} not divisible by pool size {size}")
        return self._add(LayerNode(node_id, "pool", [src], attrs={"mode": "max", "size": size}),
                         (c, h // size, w // size))

    def residual_add(self, node_id, a, b):
        if self.shapes[a] != self.shapes[b]:
            raise ConfigurationError(f"{node_id}: cannot add {self.shapes[a]} and {self.shapes[b]}")
        return self._add(LayerNode(node_id, "residual-add", [a, b]), self.shapes[a])

    def detect_head(self, node_id, classes, src=None):
        src = src or self.last
        c, h, w = self.shapes[src]
        if c != BOX_CHANNELS + classes or h != w:
            raise ConfigurationError(f"{node_id}: head input {self.shapes[src]} is not [5+{classes}, g, g]")
        node = LayerNode(node_id, "detect-head", [src], attrs={"grid": h, "classes": classes})
        self.meta.update(classes=classes, grid=h)
        return self._add(node, (h, w, c))

    def build(self) -> ModelGraph:
        return ModelGraph(list(self.nodes), dict(self.meta))


def build_toy(paradigm: str, depth: int, width: int, classes: int, grid: int,
              image_size: int = 32, seed: int = 0) -> ModelGraph:
    """Toy detector: ``depth`` backbone convs of the given paradigm plus a 1x1 prediction conv."""
    if paradigm not in PARADIGMS:
        raise ConfigurationError(f"paradigm must be one of {PARADIGMS}, got {paradigm!r}")
    if depth < 3 or width < 4 or classes < 1 or grid < 1:
        raise ConfigurationError(
            f"need depth >= 3, width >= 4, classes >= 1, grid >= 1 (got {depth}, {width}, {classes}, {grid})")
    if image_size % grid:
        raise ConfigurationError(f"grid {grid} does not divide image size {image_size}")
    factor = image_size // grid
    if factor & (factor - 1):
        raise ConfigurationError(f"image_size / grid = {factor} must be a power of two")
    n_down = factor.bit_length() - 1

    b = GraphBuilder((3, image_size, image_size), name=f"{paradigm}-d{depth}-w{width}",
                     rng=np.random.default_rng(seed))
    pools = 0

    def maybe_pool():
        nonlocal pools
        if pools < n_down:
            pools += 1
            b.pool(f"pool{pools}")

    if paradigm == "plain":
        for i in range(1, depth + 1):
            b.conv(f"conv{i}", width)
            b.relu(f"conv{i}.relu")
            maybe_pool()
    else:
        b.conv("stem", width)
        b.relu("stem.relu")
        maybe_pool()
        remaining = depth - 1
        k = 0
        while remaining >= 2:
            k += 1
            entry = b.last
            if paradigm == "residual":
                b.conv(f"block{k}.conv_a", width)
                b.relu(f"block{k}.relu_a")
                b.conv(f"block{k}.conv_b", width)
                b.residual_add(f"block{k}.add", entry, b.last)
                b.relu(f"block{k}.relu")
            else:
                b.conv(f"sep{k}.dw", width, groups=width)
                b.relu(f"sep{k}.dw.relu")
                b.conv(f"sep{k}.pw", width, kernel=1)
                b.relu(f"sep{k}.pw.relu")
            maybe_pool()
            remaining -= 2
        if remaining:
            b.conv("tail", width)
            b.relu("tail.relu")
            maybe_pool()
    while pools < n_down:
        maybe_pool()

    bias = np.zeros(BOX_CHANNELS + classes)
    bias[0] = -2.0  # objectness prior: most cells are empty
    b.conv("head", BOX_CHANNELS + classes, kernel=1, bias=bias)
    b.detect_head("detect", classes)
    model = b.build()
    model.meta.update(paradigm=paradigm, depth=depth, width=width, image_size=image_size, seed=seed)
    return model


def forward(model: ModelGraph, batch, overrides=None, retain_grad: bool = False):
    """Evaluate ``model`` on ``batch[N, C, H, W]``.

    Returns ``(head, conv_outputs)`` where ``conv_outputs`` maps every conv node id
    to its output tensor.  ``overrides`` replaces the output of the named nodes by
    the given arrays or tensors; ``retain_grad`` keeps loss gradients on conv outputs.
    """
    x = batch if isinstance(batch, Tensor) else Tensor._wrap(np.asarray(batch, dtype=np.float64))
    expected = tuple(model.meta["input_shape"])
    if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"node input: batch shape {x.shape} does not match [N, {', '.join(map(str, expected))}]")
    overrides = overrides or {}
    values = {}
    convs = {}
    head = None
    for node in model.nodes:
        if node.id in overrides:
            v = overrides[node.id]
            out = v if isinstance(v, Tensor) else Tensor._wrap(np.asarray(v, dtype=np.float64))
        else:
            try:
                out = _eval_node(node, x, [values[s] for s in node.inputs])
            except DimensionError as exc:
                raise DimensionError(f"node {node.id}: {exc}") from exc
        if node.kind == "conv":
            if retain_grad:
                out.retain_grad()
            convs[node.id] = out
        if node.kind == "detect-head":
            head = out
        values[node.id] = out
    if head is None:
        head = values[model.nodes[-1].id]
    return head, convs


def _eval_node(node: LayerNode, x: Tensor, ins: list) -> Tensor:
    k = node.kind
    if k == "input":
        return x
    if k == "conv":
        a = node.attrs
        return T.conv2d(ins[0], node.params["weight"], node.params["bias"],
                        stride=a["stride"], padding=a["padding"], groups=a["groups"])
    if k == "dense":
        return T.dense(ins[0], node.params["weight"], node.params["bias"])
    if k == "relu":
        return T.relu(ins[0])
    if k == "pool":
        if node.attrs["mode"] == "global":
            return T.global_avg_pool(ins[0])
        return T.max_pool2d(ins[0], node.attrs["size"])
    if k == "residual-add":
        if ins[0].shape != ins[1].shape:
            raise DimensionError(f"residual add of {ins[0].shape} and {ins[1].shape}")
        return T.add(ins[0], ins[1])
    if k == "detect-head":
        return T.permute(ins[0], (0, 2, 3, 1))
    raise ConfigurationError(f"cannot evaluate kind {k!r}")


def predict(model: ModelGraph, images, batch_size: int = 64) -> np.ndarray:
    """Head output for a stack of images, evaluated without a tape."""
    images = np.asarray(images, dtype=np.float64)
    outs = [forward(model, images[i:i + batch_size])[0].data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------- decoding


def _sigmoid(z):
    return T._sigmoid_np(np.asarray(z, dtype=np.float64))


def decode(head, conf_threshold: float = 0.05, nms_iou: float = 0.5) -> list:
    """Turn a head tensor ``[N, g, g, 5+C]`` into one list of detections per image."""
    h = head.data if isinstance(head, Tensor) else np.asarray(head, dtype=np.float64)
    if h.ndim != 4 or h.shape[1] != h.shape[2] or h.shape[3] <= BOX_CHANNELS:
        raise DimensionError(f"head output must be [N, g, g, 5+C], got {h.shape}")
    n, g = h.shape[0], h.shape[1]
    obj = _sigmoid(h[..., 0])
    logits = h[..., BOX_CHANNELS:]
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    cls = probs.argmax(axis=-1)
    conf = obj * probs.max(axis=-1)
    fx, fy = _sigmoid(h[..., 1]), _sigmoid(h[..., 2])
    tw, th = np.clip(h[..., 3], -30, 30), np.clip(h[..., 4], -30, 30)
    out = []
    for i in range(n):
        dets = []
        rows, cols = np.nonzero(conf[i] > conf_threshold)
        for r, c in zip(rows, cols):
            box = ((c + fx[i, r, c]) / g, (r + fy[i, r, c]) / g,
                   math.exp(tw[i, r, c]) / g, math.exp(th[i, r, c]) / g)
            dets.append(Detection(tuple(float(v) for v in box), int(cls[i, r, c]),
                                  float(min(1.0, conf[i, r, c]))))
        out.append(nms(dets, nms_iou))
    return out


def ideal_head(targets: np.ndarray, classes: int, sharpness: float = 40.0) -> np.ndarray:
    """Head tensor that decodes exactly to the objects encoded in ``targets[N, g, g, 6]``."""
    targets = np.asarray(targets, dtype=np.float64)
    n, g = targets.shape[0], targets.shape[1]
    head = np.zeros((n, g, g, BOX_CHANNELS + classes))
    pos = targets[..., 0] > 0.5
    head[..., 0] = np.where(pos, sharpness, -sharpness)
    fx = np.clip(targets[..., 2], 1e-12, 1 - 1e-12)
    fy = np.clip(targets[..., 3], 1e-12, 1 - 1e-12)
    head[..., 1] = np.where(pos, np.log(fx) - np.log1p(-fx), 0.0)
    head[..., 2] = np.where(pos, np.log(fy) - np.log1p(-fy), 0.0)
    head[..., 3] = np.where(pos, targets[..., 4], 0.0)
    head[..., 4] = np.where(pos, targets[..., 5], 0.0)
    onehot = np.eye(classes)[targets[..., 1].astype(int)]
    head[..., BOX_CHANNELS:] = np.where(pos[..., None], sharpness * onehot, 0.0)
    return head


def loss_terms(head: Tensor, targets, reduction: str = "mean") -> dict:
    """Differentiable loss components keyed ``objectness`` / ``class`` / ``box``."""
    targets = np.asarray(targets, dtype=np.float64)
    if head.data.ndim != 4 or targets.shape[:3] != head.shape[:3] or targets.shape[3] != 6:
        raise DimensionError(f"targets {targets.shape} do not match head {head.shape} (expected [N, g, g, 6])")
    classes = head.shape[3] - BOX_CHANNELS
    pos = targets[..., 0]
    cls_ids = np.where(pos > 0.5, targets[..., 1], 0).astype(int)
    if cls_ids.size and cls_ids.max() >= classes:
        raise DimensionError(f"target class id {cls_ids.max()} >= head classes {classes}")

    obj_l = T.bce_with_logits(T.take(head, 0, 1), pos[..., None])
    cls_l = T.softmax_cross_entropy(T.take(head, BOX_CHANNELS, BOX_CHANNELS + classes), cls_ids, weight=pos)
    w2 = np.repeat(pos[..., None], 2, axis=-1)
    xy_l = T.smooth_l1(T.sigmoid(T.take(head, 1, 3)), targets[..., 2:4], weight=w2)
    wh_l = T.smooth_l1(T.take(head, 3, 5), targets[..., 4:6], weight=w2)
    box_l = T.add(xy_l, wh_l)
    if reduction == "mean":
        scale = 1.0 / head.shape[0]
        obj_l, cls_l, box_l = T.mul(obj_l, scale), T.mul(cls_l, scale), T.mul(box_l, scale)
    elif reduction != "sum":
        raise ConfigurationError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    return {"objectness": obj_l, "class": cls_l, "box": box_l}


def detection_loss(head: Tensor, targets, reduction: str = "mean") -> LossValue:
    """Objectness BCE over all cells + class CE and box smooth-L1 over positive cells.

    The three terms are summed without weights.  ``reduction="mean"`` divides by
    the batch size; ``"sum"`` keeps per-image losses summed, so the gradient with
    respect to one image's activations is that image's own loss gradient.
    """
    terms = loss_terms(head, targets, reduction)
    total = T.add(T.add(terms["objectness"], terms["class"]), terms["box"])
    return LossValue(total, {k: v.item() for k, v in terms.items()})


# ---------------------------------------------------------------- persistence


def save_checkpoint(model: ModelGraph, path, extra: dict | None = None) -> Path:
    nodes = []
    arrays = {}
    for n in model.nodes:
        nodes.append({
            "id": n.id, "kind": n.kind, "inputs": list(n.inputs), "prunable": n.prunable,
            "attrs": n.attrs, "params": {k: f"{n.id}.{k}" for k in sorted(n.params)},
        })
        for k, p in n.params.items():
            arrays[f"{n.id}.{k}"] = p.data
    manifest = {"format": "attrprune-checkpoint", "version": 1, "meta": model.meta, "nodes": nodes}
    if extra:
        manifest["extra"] = extra
    return write_container(path, manifest, arrays)


def load_checkpoint(path) -> ModelGraph:
    manifest, arrays = read_container(path)
    if manifest.get("format") != "attrprune-checkpoint":
        raise InputError(f"{path} is not a model checkpoint")
    nodes = []
    for entry in manifest["nodes"]:
        params = {k: Tensor(arrays[blob], requires_grad=True) for k, blob in entry["params"].items()}
        nodes.append(LayerNode(entry["id"], entry["kind"], list(entry["inputs"]), params,
                               entry.get("attrs", {}), entry["prunable"]))
    return ModelGraph(nodes, manifest["meta"])


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Structural and bitwise parameter equality."""
    if a.meta != b.meta or len(a.nodes) != len(b.nodes):
        return False
    for x, y in zip(a.nodes, b.nodes):
        if (x.id, x.kind, x.inputs, x.attrs, x.prunable) != (y.id, y.kind, y.inputs, y.attrs, y.prunable):
            return False
        if sorted(x.params) != sorted(y.params):
            return False
        for k in x.params:
            px, py = x.params[k].data, y.params[k].data
            if px.shape != py.shape or px.tobytes() != py.tobytes():
                return False
    return True


def has_path(model: ModelGraph, src: str, dst: str, removed=()) -> bool:
    """Whether ``dst`` is reachable from ``src`` when the ``removed`` nodes are deleted."""
    removed = set(removed)
    reach = {src} if src not in removed else set()
    for node in model.nodes:
        if node.id in removed or node.id == src:
            continue
        if any(s in reach for s in node.inputs):
            reach.add(node.id)
    return dst in reach
