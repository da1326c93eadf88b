"""Minimal dense tensor with reverse-mode automatic differentiation.

Tensors wrap a C-contiguous float64 numpy array. Every differentiable
operation records its inputs and a backward closure on the output node;
``backward(loss)`` walks the resulting graph once in reverse topological
order and accumulates gradients additively into ``requires_grad`` leaves.

Design notes:
  * float64 everywhere, copies instead of views; at desk scale this keeps
    gradient checks tight and the graph trivially correct.
  * Broadcasting is supported for elementwise ops and matmul batch dims;
    backward sums gradients down to the original operand shapes.
  * The graph is single-threaded per training step. Tensors are immutable
    after creation except for their ``grad`` buffers.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, ShapeError

Number = Union[int, float]
TensorLike = Union["Tensor", np.ndarray, Number, Sequence]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Set by the no_grad() context manager; when False, ops do not record
# parents or backward closures.
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 array participating in the gradient graph.

    Attributes:
        data: the C-contiguous float64 numpy array (row-major buffer).
        requires_grad: whether backward() should deposit a gradient here.
        grad: accumulated gradient, same shape as ``data``, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data: TensorLike, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- contract-facing views ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f".T needs a 2-d tensor, got shape {self.shape}")
        return transpose(self, (1, 0))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def _as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap an op result, recording the graph edge if grad is enabled."""
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if _GRAD_ENABLED and out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def neg(a: TensorLike) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def exp(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: TensorLike) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


def gelu(a: TensorLike) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accumulate(a, g * (cdf + x * pdf))

    return _make(out_data, (a,), backward)


# -- structural ops -----------------------------------------------------------


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # broadcast weight: fold batch dims into one flat GEMM
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                _accumulate(b, gb)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return _make(data, ts, backward)


def narrow(a: TensorLike, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[index] = g
            _accumulate(a, full)

    return _make(a.data[index].copy(), (a,), backward)


def gather_rows(a: TensorLike, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate on backward."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows wants a 1-d index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")

    def backward(g):
        if a.requires_grad:
            full = np.zeros(a.shape)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _make(a.data[idx].copy(), (a,), backward)


def embedding(table: TensorLike, ids) -> Tensor:
    """Look up rows of ``table`` for an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros(table.shape)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accumulate(table, full)

    return _make(data, (table,), backward)


def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _make(data, (a,), backward)


def tensor_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- fused neural-net ops -----------------------------------------------------


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * s).sum(axis=axis, keepdims=True)
            _accumulate(a, s * (g - inner))

    return _make(s, (a,), backward)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return _make(ls, (a,), backward)


def layer_norm(a: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = y * gain.data + bias.data
    reduce_axes = tuple(range(a.ndim - 1))

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * y).sum(axis=reduce_axes))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=reduce_axes))
        if a.requires_grad:
            dy = g * gain.data
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * y).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (dy - m1 - y * m2))

    return _make(data, (a, gain, bias), backward)


def cross_entropy(logits: TensorLike, targets) -> Tensor:
    """Mean negative log softmax probability of the target classes.

    ``logits`` is (n, num_classes); ``targets`` is a length-n index array.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy wants 2-d logits, got shape {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match {n} logit rows")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"target class out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ls = shifted - lse
    loss = -ls[np.arange(n), t].mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(ls)
            p[np.arange(n), t] -= 1.0
            _accumulate(logits, (float(g) / n) * p)

    return _make(np.asarray(loss), (logits,), backward)


# -- reverse pass -------------------------------------------------------------


class GradientTape:
    """Topologically ordered record of the op graph beneath a root tensor.

    Reverse iteration visits every recorded operation exactly once, each
    before any of its inputs.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order  # inputs before outputs

    def reversed_nodes(self) -> list[Tensor]:
        return list(reversed(self.nodes))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros(t.shape)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with requires_grad.

    Gradients accumulate additively; callers zero parameter grads between
    steps. Intermediate nodes also receive grads and are simply discarded
    with the graph.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = GradientTape(loss)
    _accumulate(loss, np.ones(()))
    for node in tape.reversed_nodes():
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- parameter helpers ---------------------------------------------------------


def parameter(data: TensorLike) -> Tensor:
    return Tensor(data, requires_grad=True)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())
