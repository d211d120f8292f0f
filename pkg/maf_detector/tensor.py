#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tensor and Tape
===============
Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every primitive computes its forward values with numpy and, when a tape is
active and one of its inputs requires a gradient, records a node holding the
closure that maps the upstream gradient to input gradients. A new tape is
built for every training iteration.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_check_finite = False


class ShapeError(ValueError):
    """Incompatible tensor shapes"""


def set_finite_checks(enabled: bool) -> None:
    """Enable the NaN/Inf check after every forward op (debug.check_finite)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """Dense float64 array that can take part in a tape."""

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _result(cls, values: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        values = np.asarray(values, dtype=np.float64)
        # ascontiguousarray promotes 0-d to (1,)
        out.values = values if values.flags.c_contiguous else np.ascontiguousarray(values)
        out.values.flags.writeable = False
        out.requires_grad = False
        out.name = ""
        out.node_id = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.values)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: Tuple[int, ...]


class Tape:
    """Append-only record of the ops of one forward pass."""

    _stack: List[Optional["Tape"]] = []

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.leaves: Dict[int, Tensor] = {}
        # smallest distance of any relu input / pooling window to a kink
        self.kink_margin = float("inf")

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, tensor: Tensor) -> Optional[int]:
        if tensor._tape is self:
            return tensor.node_id
        if not tensor.requires_grad:
            return None
        node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), None, tensor.shape))
        self.leaves[node_id] = tensor
        tensor.node_id = node_id
        tensor._tape = self
        return node_id

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: BackwardFn) -> Tensor:
        ids = tuple(self.node_of(t) for t in inputs)
        node_id = len(self.nodes)
        self.nodes.append(TapeNode(op, ids, backward, out.shape))
        out.node_id = node_id
        out._tape = self
        out.requires_grad = True
        return out

    def note_kink(self, margin: float) -> None:
        self.kink_margin = min(self.kink_margin, float(margin))


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording, even inside an active tape."""
    Tape._stack.append(None)
    try:
        yield
    finally:
        Tape._stack.pop()


def note_kink(margin: float) -> None:
    tape = Tape.current()
    if tape is not None:
        tape.note_kink(margin)


def note_window_gap(windows: np.ndarray) -> None:
    """Record the smallest positive gap between the two largest entries of each window.

    Exact ties are skipped: they come from relu zeros, which stay tied under
    small perturbations.
    """
    if Tape.current() is None or windows.shape[-1] < 2:
        return
    ordered = np.sort(windows.reshape(-1, windows.shape[-1]), axis=-1)
    gaps = ordered[:, -1] - ordered[:, -2]
    gaps = gaps[gaps > 0]
    if gaps.size:
        note_kink(gaps.min())


def apply_op(op: str, inputs: Sequence[Tensor], values: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap forward values and record the op when a gradient is needed."""
    out = Tensor._result(values)
    if _check_finite and not np.all(np.isfinite(out.values)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = Tape.current()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    return tape.record(op, inputs, out, backward)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Gradients:
    """Gradients of one backward pass, keyed by the leaf tensor."""

    def __init__(self, pairs: Sequence[Tuple[Tensor, np.ndarray]]):
        self._grads: Dict[int, Tuple[Tensor, np.ndarray]] = {id(t): (t, g) for t, g in pairs}

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._grads.get(id(tensor))
        if entry is None:
            return np.zeros(tensor.shape)
        return entry[1]

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return list(self._grads.values())


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Accumulate d(loss)/d(leaf) by visiting nodes in reverse order."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise ValueError("loss is not recorded on this tape")

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaf_grads: List[Tuple[Tensor, np.ndarray]] = []
    for node_id in range(loss.node_id, -1, -1):
        grad = pending.pop(node_id, None)
        if grad is None:
            continue
        node = tape.nodes[node_id]
        if node.backward is None:
            leaf_grads.append((tape.leaves[node_id], grad))
            continue
        for input_id, input_grad in zip(node.inputs, node.backward(grad)):
            if input_id is None or input_grad is None:
                continue
            if input_id in pending:
                pending[input_id] = pending[input_id] + input_grad
            else:
                pending[input_id] = input_grad
    return Gradients(leaf_grads)


###############################################################################
# Elementwise arithmetic                                                      #
###############################################################################

def _pair(op: str, a, b) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.values.ndim != 0 and b.values.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", (a, b), a.values + b.values, _backward)


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", (a, b), a.values - b.values, _backward)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _pair("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return apply_op("mul", (a, b), a.values * b.values, _backward)


def scale(x: Tensor, factor: Number) -> Tensor:
    factor = float(factor)
    return apply_op("scale", (x,), x.values * factor, lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    return apply_op("sum", (x,), np.asarray(x.values.sum()),
                    lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = x.size
    return apply_op("mean", (x,), np.asarray(x.values.mean()),
                    lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


###############################################################################
# Layers                                                                      #
###############################################################################

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """xW + b for x[N,I], W[I,O], b[O]."""
    if x.values.ndim != 2 or w.values.ndim != 2 or b.values.ndim != 1:
        raise ShapeError(f"affine expects x[N,I], W[I,O], b[O], got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: dimension mismatch {x.shape} x {w.shape} + {b.shape}")

    def _backward(g):
        return g @ w.values.T, x.values.T @ g, g.sum(axis=0)

    return apply_op("affine", (x, w, b), x.values @ w.values + b.values, _backward)


def _conv_output(size: int, kernel: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ShapeError(f"conv2d: non-integral output {axis} for size {size}, kernel {kernel}, "
                         f"stride {stride}, pad {pad}")
    return span // stride + 1


def conv2d(x: Tensor, k: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[C_in,H,W] with k[C_out,C_in,kh,kw]."""
    if x.values.ndim != 3 or k.values.ndim != 4:
        raise ShapeError(f"conv2d expects x[C,H,W] and k[O,C,kh,kw], got {x.shape} and {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape[0]} do not match kernel {k.shape}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {c_out} output channels")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    out_h = _conv_output(x.shape[1], kh, stride, pad, "height")
    out_w = _conv_output(x.shape[2], kw, stride, pad, "width")

    padded = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad))) if pad else x.values
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :out_h, :out_w]
    out = np.tensordot(k.values, windows, axes=([1, 2, 3], [0, 3, 4])) + b.values[:, None, None]

    def _backward(g):
        grad_k = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        grad_b = g.sum(axis=(1, 2))
        grad_padded = np.zeros(padded.shape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(k.values[:, :, i, j], g, axes=([0], [0]))
                grad_padded[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contrib
        if pad:
            grad_padded = grad_padded[:, pad:-pad, pad:-pad]
        return grad_padded, grad_k, grad_b

    return apply_op("conv2d", (x, k, b), out, _backward)


def relu(x: Tensor) -> Tensor:
    if x.size:
        note_kink(np.abs(x.values).min())
    mask = x.values > 0
    return apply_op("relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return apply_op("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route to the first element in row-major order."""
    if window != stride:
        raise ShapeError(f"maxpool2d supports window == stride only, got {window} and {stride}")
    if x.values.ndim != 3:
        raise ShapeError(f"maxpool2d expects x[C,H,W], got {x.shape}")
    c, h, w = x.shape
    s = stride
    if h % s or w % s:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by stride {s}")
    blocks = x.values.reshape(c, h // s, s, w // s, s).transpose(0, 1, 3, 2, 4).reshape(c, h // s, w // s, s * s)
    argmax = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, argmax, axis=-1)[..., 0]
    if s > 1 and blocks.size:
        note_window_gap(blocks)

    def _backward(g):
        grad_blocks = np.zeros(blocks.shape)
        np.put_along_axis(grad_blocks, argmax, g[..., None], axis=-1)
        return (grad_blocks.reshape(c, h // s, w // s, s, s).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return apply_op("maxpool2d", (x,), out, _backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return apply_op("softmax", (x,), s, _backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    if logits.values.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects logits[N,K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if n == 0:
        raise ShapeError("softmax_cross_entropy over zero rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")

    m = logits.values.max(axis=1, keepdims=True)
    e = np.exp(logits.values - m)
    total = e.sum(axis=1, keepdims=True)
    log_z = m[:, 0] + np.log(total[:, 0])
    rows = np.arange(n)
    loss = np.mean(log_z - logits.values[rows, labels])

    def _backward(g):
        grad = e / total
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return apply_op("softmax_cross_entropy", (logits,), np.asarray(loss), _backward)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean over elements of 0.5e^2 if |e|<1 else |e|-0.5."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.shape} and {target.shape} differ")
    if pred.size == 0:
        return Tensor(0.0)
    e = pred.values - target.values
    small = np.abs(e) < 1.0
    loss = np.where(small, 0.5 * e * e, np.abs(e) - 0.5).mean()
    n = e.size

    def _backward(g):
        grad = np.where(small, e, np.sign(e)) * (g / n)
        return grad, -grad

    return apply_op("smooth_l1", (pred, target), np.asarray(loss), _backward)


###############################################################################
# Shape ops                                                                   #
###############################################################################

def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    xs = [as_tensor(x) for x in xs]
    ndim = xs[0].values.ndim
    axis = axis % ndim if ndim else 0
    for x in xs[1:]:
        other = [d for i, d in enumerate(x.shape) if i != axis]
        first = [d for i, d in enumerate(xs[0].shape) if i != axis]
        if x.values.ndim != ndim or other != first:
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    extents = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def _backward(g):
        return tuple(np.split(g, extents, axis=axis))

    return apply_op("concat", xs, np.concatenate([x.values for x in xs], axis=axis), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", (x,), x.values.transpose(axes), lambda g: (g.transpose(inverse),))


def take(x: Tensor, index: int) -> Tensor:
    """x[index] along the first axis."""

    def _backward(g):
        grad = np.zeros(x.shape)
        grad[index] = g
        return (grad,)

    return apply_op("take", (x,), x.values[index], _backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)

    def _backward(g):
        grad = np.zeros(x.shape)
        np.add.at(grad, indices, g)
        return (grad,)

    return apply_op("gather_rows", (x,), x.values[indices], _backward)


def stack(xs: Sequence[Tensor]) -> Tensor:
    return concat([reshape(x, (1,) + x.shape) for x in xs], axis=0)
