"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation records a :class:`Node` on its output.  A
:class:`Graph` is recovered from a loss by walking those records and ordering
them by creation id, so the backward sweep is a plain reverse iteration.
The graph is rebuilt on every forward pass (define-by-run).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

LAYER_NORM_EPS = 1e-6
PROB_CLAMP = 1e-7
_GELU_C = math.sqrt(2.0 / math.pi)

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_ids))


class Tensor:
    """Dense float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple, bw) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, out, bw)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x of shape [..., D_in] and w of shape [D_in, D_out]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", w.shape, b.shape, detail="bias width")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = g @ w.data.T
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", out, inputs, bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape, detail="need at least 2 dims")
    return _record("transpose", np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", a.shape, detail=f"bad axes {axes}")
    inv = tuple(np.argsort(axes))
    return _record("permute", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` to ``shape`` (materialized)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("expand", a.shape, shape) from None
    return _record("expand", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(tensors), bw)


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows along the token axis.

    ``a`` of shape [N, D] takes a 1-D index.  ``a`` of shape [B, N, D] takes
    either a 1-D index shared by the batch or a [B, K] index per sample.
    """
    idx = np.asarray(index, dtype=np.intp)
    if a.ndim == 2 and idx.ndim == 1:
        sel = (idx,)
    elif a.ndim == 3 and idx.ndim == 1:
        sel = (slice(None), idx)
    elif a.ndim == 3 and idx.ndim == 2 and idx.shape[0] == a.shape[0]:
        sel = (np.arange(a.shape[0])[:, None], idx)
    else:
        raise ShapeError("gather_rows", a.shape, idx.shape)
    if idx.size and (idx.min() < -a.shape[-2] or idx.max() >= a.shape[-2]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[-2]} rows")

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, sel, g)
        return (ga,)

    return _record("gather_rows", a.data[sel], (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply an affine map."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm", x.shape, detail="normalized dimension is empty")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", out, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _record("gelu", out, (x,), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim", x.shape)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# losses


def mse_all_patches(xhat: Tensor, target) -> Tensor:
    """Mean squared error over every element of every patch, masked or not."""
    target = as_tensor(target)
    if xhat.shape != target.shape:
        raise ShapeError("mse_all_patches", xhat.shape, target.shape)
    diff = xhat.data - target.data
    n = diff.size

    def bw(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _record("mse_all_patches", np.mean(diff * diff), (xhat, target), bw)


def binary_cross_entropy(yhat: Tensor, y, smoothing: float = 0.0,
                         clamp: float = PROB_CLAMP) -> Tensor:
    """Binary cross entropy on probabilities, averaged over the batch.

    Hard labels are softened to ``y*(1-s) + (1-y)*s`` before the loss.
    """
    if not 0.0 <= smoothing < 0.5:
        raise ValueError(f"smoothing must lie in [0, 0.5), got {smoothing}")
    y = np.asarray(y, dtype=DTYPE)
    if y.shape != yhat.shape:
        raise ShapeError("binary_cross_entropy", yhat.shape, y.shape)
    t = y * (1.0 - smoothing) + (1.0 - y) * smoothing
    p = np.clip(yhat.data, clamp, 1.0 - clamp)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    n = max(loss.size, 1)
    inside = (yhat.data >= clamp) & (yhat.data <= 1.0 - clamp)

    def bw(g):
        return (g * inside * (-t / p + (1.0 - t) / (1.0 - p)) / n,)

    return _record("binary_cross_entropy", np.mean(loss), (yhat,), bw)


# ---------------------------------------------------------------------------
# graph and backward sweep


class Graph:
    """Operations reachable from an output, in recording order."""

    def __init__(self, ops: list[Node]):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: set[int] = set()
        ops: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            ops.append(node)
            stack.extend(node.inputs)
        ops.sort(key=lambda n: n.id)
        return cls(ops)

    def __len__(self):
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        pending: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.ops):
            g = grads.pop(id(node.output), None)
            pending.pop(id(node.output), None)
            if g is None:
                continue
            _accumulate(node.output, g)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    pending[key] = inp
        # whatever is left has no producing node: leaves
        for key, g in grads.items():
            _accumulate(pending[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``."""
    if graph is None:
        graph = Graph.from_output(loss)
    graph.backward(loss)
    return graph


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
