"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array. Every differentiable operation returns a
new tensor that remembers its parents and a closure mapping the output gradient
to parent gradients. :meth:`Tensor.backward` orders the recorded graph
topologically (the tape) and replays it in reverse exactly once.

Two pieces of per-context state are kept in :mod:`contextvars` so that
independent threads never share them:

- a debug flag that checks every op output for NaN/Inf, and
- an optional :class:`OpCounter` that tallies arithmetic work per op kind.

Costs follow one convention throughout the package: a multiply-accumulate
counts as one FLOP, plain elementwise ops count one per output element, and
the fused ops cost ``OP_COSTS[kind]`` per element.
"""

from __future__ import annotations

import contextlib
import contextvars
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, FormatError, NumericalError

OP_COSTS = {
    "elementwise": 1,
    "softmax": 3,
    "layernorm": 5,
    "gelu": 1,
    "sigmoid": 1,
    "reduce": 1,
}

_default_dtype = np.float64
_debug = contextvars.ContextVar("tpcvit_debug", default=False)
_counter = contextvars.ContextVar("tpcvit_counter", default=None)
_grad_enabled = contextvars.ContextVar("tpcvit_grad", default=True)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for non-finite values while active."""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; outputs never require grad."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@dataclass
class OpCounter:
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, amount: int) -> None:
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(amount)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())


@contextlib.contextmanager
def count_ops():
    """Tally arithmetic work of every op executed inside the block."""
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _tally(kind: str, amount) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(kind, amount)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._released = False
        out.requires_grad = _grad_enabled.get() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if _debug.get() and not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite value produced (shape {data.shape})")
        return out

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        The graph is released afterwards; calling backward on it again raises.
        """
        if self._released:
            raise ContractError("backward() already ran on this graph; rebuild it before calling again")
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        tape = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                tape.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in tape:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True
        self._released = True

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# -- elementwise binary ops ---------------------------------------------------

def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    return _const_like(a, ref), _const_like(b, ref)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data
    _tally("elementwise", out.size)
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data - b.data
    _tally("elementwise", out.size)
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data * b.data
    _tally("elementwise", out.size)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    _tally("elementwise", out.size)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    _tally("elementwise", out.size)
    return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _binary_operands(a, b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), backward)


# -- elementwise unary ops ------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _tally("elementwise", out.size)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    _tally("elementwise", out.size)
    return Tensor._make(out, (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    _tally("sigmoid", OP_COSTS["sigmoid"] * out.size)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    out = z * cdf
    _tally("gelu", OP_COSTS["gelu"] * out.size)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        return (g * (cdf + z * pdf),)

    return Tensor._make(out.astype(z.dtype, copy=False), (x,), backward)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    _tally("reduce", x.size)
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    _tally("reduce", x.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match or broadcast."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc
    _tally("matmul", out.size * a.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


# -- normalisation and softmax ----------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax. Entries where ``mask`` is False get exactly zero weight."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    _tally("softmax", OP_COSTS["softmax"] * out.size)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data
    shifted = z - np.max(z, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    _tally("softmax", OP_COSTS["softmax"] * out.size)

    def backward(g):
        soft = np.exp(out)
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply the affine ``weight``/``bias``."""
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm: affine shapes {weight.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    _tally("layernorm", OP_COSTS["layernorm"] * out.size)
    n = x.shape[-1]

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N x C) against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"cross_entropy: labels must lie in [0, {logits.shape[1]})")
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    return -mean(picked)


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return Tensor._make(out, (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise ContractError("index with integer arrays, not Tensors")
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, copy=not basic) if basic else out, (x,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` picked by an integer array of any shape; result is ``index.shape + x.shape[1:]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {x.shape[0]} rows")
    return getitem(x, index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), backward)


# -- serialisation ------------------------------------------------------------
# record: dtype tag u8, rank u32, extents u64[rank], raw little-endian data

_DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


def tensor_to_bytes(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise ContractError(f"cannot serialise dtype {arr.dtype}")
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(le).tobytes()


def write_tensor(stream: BinaryIO, x) -> None:
    stream.write(tensor_to_bytes(x))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    start = stream.tell() if stream.seekable() else None
    head = stream.read(5)
    if len(head) != 5:
        raise FormatError("truncated tensor header", start)
    tag, rank = struct.unpack("<BI", head)
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}", start)
    raw = stream.read(8 * rank)
    if len(raw) != 8 * rank:
        raise FormatError("truncated tensor extents", start)
    shape = struct.unpack(f"<{rank}Q", raw)
    dtype = _TAG_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError("truncated tensor payload", start)
    return np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
