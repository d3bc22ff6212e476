"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record a node on the active :class:`Tape` whenever one of their
inputs requires a gradient.  Nothing is recorded outside a ``with Tape():``
block, so inference never pays for bookkeeping.

    with Tape() as tape:
        loss = tsum(mul(w, x))
    backward(loss)          # w.grad is now x
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "LossValue",
    "backward",
    "conv2d",
    "relu",
    "add",
    "mul",
    "max_pool2d",
    "global_avg_pool",
    "dense",
    "sigmoid",
    "softmax_cross_entropy",
    "smooth_l1",
    "bce_with_logits",
    "tsum",
    "permute",
    "take",
]

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "retains_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.retains_grad = False
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t.retains_grad = False
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class TapeNode:
    op: str
    inputs: list
    output: Tensor
    backward_fn: Callable = field(repr=False)


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn) -> None:
        if self.consumed:
            raise StateError("tape already consumed by backward()")
        output.requires_grad = True
        output._tape = self
        output._node = len(self.nodes)
        self.nodes.append(TapeNode(op, list(inputs), output, backward_fn))


@dataclass
class LossValue:
    """Scalar loss tensor plus its named components."""

    tensor: Tensor
    components: dict

    @property
    def scalar(self) -> float:
        return self.tensor.item()


def _result(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    t = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        tape.record(op, inputs, t, backward_fn)
    return t


def backward(loss) -> None:
    """Populate ``grad`` on every leaf that contributed to ``loss``; clears the tape."""
    t = loss.tensor if isinstance(loss, LossValue) else loss
    if t._tape is None:
        raise StateError("loss was not produced on a tape")
    tape = t._tape
    if tape.consumed:
        raise StateError("backward() already ran on this tape")
    if t.data.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {t.shape}")

    pending = {id(t): np.ones_like(t.data)}
    for node in reversed(tape.nodes[: t._node + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        out = node.output
        if out.retains_grad:
            out.grad = g.copy() if out.grad is None else out.grad + g
        grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig
    tape.nodes.clear()
    tape.consumed = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum", (x,), np.array([x.data.sum()]),
                   lambda g: (np.full(shape, g.reshape(-1)[0]),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("permute", (x,), np.transpose(x.data, axes),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def take(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along the last axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _result("take", (x,), x.data[..., start:stop], bw)


# ---------------------------------------------------------------- layers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``weight[Cout,Cin/groups,kh,kw]``."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D [N,Cin,H,W], got shape {x.shape}")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-D [Cout,Cin,kh,kw], got shape {weight.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigurationError(f"conv2d: bad stride={stride}/padding={padding}/groups={groups}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin != cin_g * groups:
        raise DimensionError(
            f"conv2d: input axis 1 (Cin={cin}) does not match weight axis 1 "
            f"({cin_g}) x groups ({groups})")
    if cout % groups:
        raise DimensionError(f"conv2d: weight axis 0 (Cout={cout}) not divisible by groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match weight axis 0 (Cout={cout})")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d: output extent ({h}+2*{padding}-{kh})/{stride}+1 x "
            f"({w}+2*{padding}-{kw})/{stride}+1 is not a positive integer")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]  # N,C,Ho,Wo,kh,kw
    wd = weight.data
    cout_g = cout // groups

    if groups == 1:
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
        wmat = wd.reshape(cout, -1)
        out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    else:
        wg = win.reshape(n, groups, cin_g, ho, wo, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", wg, wd.reshape(groups, cout_g, cin_g, kh, kw),
                        optimize=True).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        if groups == 1:
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (gmat.T @ cols).reshape(wd.shape)
        else:
            gg = g.reshape(n, groups, cout_g, ho, wo)
            gw = np.einsum("ngohw,ngchwij->gocij", gg, wg, optimize=True).reshape(wd.shape)
        if not x.requires_grad:
            return (None, gw, g.sum(axis=(0, 2, 3)) if bias is not None else None)
        if groups == 1:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        else:
            gcols = np.einsum("ngohw,gocij->ngchwij", gg,
                              wd.reshape(groups, cout_g, cin_g, kh, kw),
                              optimize=True).reshape(n, cin, ho, wo, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result("conv2d", inputs, out, bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling; ties route gradient to the first max."""
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d: input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial axes ({h},{w}) not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result("max_pool2d", (x,), out, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    return _result("global_avg_pool", (x,), x.data.mean(axis=(2, 3)),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[N,in] @ weight[out,in].T + bias[out]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"dense: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input axis 1 ({x.shape[1]}) != weight axis 1 ({weight.shape[1]})")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0) if bias is not None else None)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result("dense", inputs, out, bw)


# ---------------------------------------------------------------- losses
# Every loss returns a one-element tensor holding a (weighted) sum.


def _weights(weight, shape, op):
    if weight is None:
        return np.ones(shape)
    w = np.asarray(weight, dtype=np.float64)
    if w.shape != shape:
        raise DimensionError(f"{op}: weight shape {w.shape} != {shape}")
    return w


def bce_with_logits(logits: Tensor, target, weight=None) -> Tensor:
    z = logits.data
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"bce_with_logits: target shape {t.shape} != logits shape {z.shape}")
    w = _weights(weight, z.shape, "bce_with_logits")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid_np(z)
    return _result("bce_with_logits", (logits,), np.array([(w * per).sum()]),
                   lambda g: (g.reshape(-1)[0] * w * (s - t),))


def softmax_cross_entropy(logits: Tensor, target, weight=None) -> Tensor:
    """Cross-entropy of ``logits[..., C]`` against integer class ids ``target[...]``."""
    z = logits.data
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != z.shape[:-1]:
        raise DimensionError(f"softmax_cross_entropy: target shape {tgt.shape} != logits batch shape {z.shape[:-1]}")
    ncls = z.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= ncls):
        raise DimensionError(f"softmax_cross_entropy: class id outside [0, {ncls})")
    w = _weights(weight, tgt.shape, "softmax_cross_entropy")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    tot = e.sum(axis=-1, keepdims=True)
    logp = z - m - np.log(tot)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
    p = e / tot
    return _result("softmax_cross_entropy", (logits,), np.array([-(w * picked).sum()]),
                   lambda g: (g.reshape(-1)[0] * w[..., None] * (p - onehot),))


def smooth_l1(pred: Tensor, target, weight=None, beta: float = 1.0) -> Tensor:
    d = pred.data - np.asarray(target, dtype=np.float64)
    if d.shape != pred.shape:
        raise DimensionError(f"smooth_l1: target does not match pred shape {pred.shape}")
    w = _weights(weight, pred.shape, "smooth_l1")
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    dper = np.where(quad, d / beta, np.sign(d))
    return _result("smooth_l1", (pred,), np.array([(w * per).sum()]),
                   lambda g: (g.reshape(-1)[0] * w * dper,))
