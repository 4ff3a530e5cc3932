"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy array. Operations executed while a
:class:`GradientTape` is active append a node to that tape whenever one of
their operands is a parameter (``requires_grad=True``) or was itself produced
on the tape. :func:`backward` replays the tape in reverse.

Outside of a tape nothing is recorded, which is the inference path.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractError, DimensionError, RankError

FLOAT_DTYPES = (np.float32, np.float64)

_TAPES: list["GradientTape"] = []


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class GradientTape:
    """Append-only record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] | None = None) -> None:
        backward(self, loss, params)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in FLOAT_DTYPES else np.float32
        elif np.dtype(dtype) not in FLOAT_DTYPES:
            raise ConfigurationError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.array(arr, dtype=dtype)  # private copy
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype, requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce(self, axis, "mean", keepdims)


def tensor(data, dtype=None, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad, name=name)


def parameter(data, dtype=None, name=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True, name=name)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor._wrap(out_data)
    if _TAPES and any(p.requires_grad or p._node is not None for p in parents):
        node = _Node(out, parents, backward_fn, op)
        _TAPES[-1].nodes.append(node)
        out._node = node
    return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_dtypes(a, b, "add")
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_dtypes(a, b, "sub")
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_dtypes(a, b, "mul")
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def elementwise(a, b, op: str) -> Tensor:
    fn = {"add": add, "sub": sub, "mul": mul}.get(op)
    if fn is None:
        raise ConfigurationError(f"unknown elementwise op {op!r}")
    return fn(a, b)


def scale_shift(x: Tensor, alpha: Tensor, beta: Tensor | None = None) -> Tensor:
    """Per-channel ``alpha * x + beta`` over the last axis."""
    c = x.shape[-1] if x.ndim else 1
    if alpha.shape != (c,) or (beta is not None and beta.shape != (c,)):
        raise DimensionError(
            f"scale_shift: channel extent {c} vs alpha {alpha.shape}"
            + (f", beta {beta.shape}" if beta is not None else ""))
    _check_dtypes(x, alpha, "scale_shift")
    xd, ad = x.data, alpha.data
    lead = tuple(range(x.ndim - 1))
    if beta is None:
        return _record(xd * ad, (x, alpha),
                       lambda g: (g * ad, (g * xd).sum(axis=lead)), "scale")
    _check_dtypes(x, beta, "scale_shift")
    return _record(xd * ad + beta.data, (x, alpha, beta),
                   lambda g: (g * ad, (g * xd).sum(axis=lead), g.sum(axis=lead)), "scale_shift")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------- activations

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    y = x * cdf

    def grad(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)
    return y, grad


def _relu(x):
    m = x > 0
    return np.where(m, x, 0).astype(x.dtype), lambda g: (g * m,)


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, lambda g: (g * (s * (1 + x * (1 - s))),)


def _hardswish(x):
    r6 = np.clip(x + 3.0, 0.0, 6.0)
    y = x * r6 / 6.0
    d = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0)).astype(x.dtype)
    return y, lambda g: (g * d,)


ACTIVATIONS = {"gelu": _gelu, "relu": _relu, "silu": _silu, "hardswish": _hardswish}


def activation(x: Tensor, kind: str = "gelu") -> Tensor:
    fn = ACTIVATIONS.get(kind)
    if fn is None:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}")
    y, grad = fn(x.data)
    return _record(y.astype(x.dtype, copy=False), (x,), grad, kind)


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy broadcasting on the rest."""
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    _check_dtypes(a, b, "matmul")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def grad(g):
        if bd.ndim == 2:
            # activations @ weight: fold all leading axes into rows
            ga = np.matmul(g, bd.T)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if ad.ndim == 2:
            # token mixing: weight @ activations
            gb = np.matmul(ad.T, g)
            gm = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
            bm = np.moveaxis(bd, -2, 0).reshape(bd.shape[-2], -1)
            return gm @ bm.T, gb
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _record(out, (a, b), grad, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise RankError(f"transpose needs rank >= 2, got shape {a.shape}")
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing, differentiable."""
    src_shape, dtype = x.shape, x.dtype
    out = x.data[index]

    def grad(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)
    return _record(np.array(out), (x,), grad, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record(out, tensors, grad, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record(np.broadcast_to(x.data, tuple(shape)), (x,), lambda g: (_unbroadcast(g, src),), "broadcast")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def grad(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)
    return _record(table.data[ids], (table,), grad, "embedding")


def where(mask, x: Tensor, fill: float) -> Tensor:
    """Replace entries where ``mask`` is False by the constant ``fill``."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.data, np.asarray(fill, dtype=x.dtype))
    return _record(out, (x,), lambda g: (np.where(mask, g, 0).astype(g.dtype),), "where")


def tril_unpack(packed: Tensor, n: int) -> Tensor:
    """Scatter a packed vector of ``n(n+1)/2`` values into a lower-triangular n×n matrix."""
    rows, cols = np.tril_indices(n)
    if packed.shape != (rows.size,):
        raise DimensionError(f"tril_unpack: expected {rows.size} packed values for n={n}, got {packed.shape}")
    out = np.zeros((n, n), dtype=packed.dtype)
    out[rows, cols] = packed.data
    return _record(out, (packed,), lambda g: (g[rows, cols],), "tril_unpack")


# ---------------------------------------------------------------- reductions

def _check_axis(x: Tensor, axis) -> tuple[int, ...] | None:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise RankError(f"axis {a} out of range for rank-{x.ndim} tensor")
        norm.append(a % x.ndim)
    return tuple(norm)


def reduce(x: Tensor, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    axes = _check_axis(x, axis)
    xd = x.data
    shape = x.shape
    kept_shape = tuple(1 if (axes is None or i in axes) else n for i, n in enumerate(shape))
    count = xd.size if axes is None else int(np.prod([shape[a] for a in axes]))
    if kind == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)
        return _record(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept_shape), shape),), "sum")
    if kind == "mean":
        out = xd.mean(axis=axes, keepdims=keepdims)
        scale = xd.dtype.type(1.0 / count)
        return _record(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept_shape) * scale, shape),), "mean")
    if kind == "max":
        out = xd.max(axis=axes, keepdims=keepdims)
        if axes is None:
            onehot = np.zeros(xd.size, dtype=bool)
            onehot[np.argmax(xd)] = True
            onehot = onehot.reshape(shape)
        elif len(axes) == 1:
            onehot = np.zeros(shape, dtype=bool)
            np.put_along_axis(onehot, np.expand_dims(np.argmax(xd, axis=axes[0]), axes[0]), True, axis=axes[0])
        else:
            onehot = xd == xd.max(axis=axes, keepdims=True)

        # gradient goes to the first maximal element only
        def grad(g):
            return (np.where(onehot, g.reshape(kept_shape), 0).astype(xd.dtype),)
        return _record(out, (x,), grad, "max")
    raise ConfigurationError(f"unknown reduction {kind!r}")


def argmax(x, axis: int = -1) -> np.ndarray:
    """Index of the maximum; ties resolve to the lowest index."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=axis)


# ---------------------------------------------------------------- normalisation / probabilities

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return _record(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _record(xhat.astype(xd.dtype, copy=False), (x,), grad, "layer_norm")


# ---------------------------------------------------------------- backward

def backward(tape: GradientTape, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every parameter leaf that ``loss`` depends on.

    Gradients are assigned, not accumulated, so repeated calls from identical
    state give identical results. Parameters listed in ``params`` that the
    loss does not reach receive zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None and not loss.requires_grad:
        raise ContractError("loss is not connected to the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss._node is None:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgs = node.backward_fn(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not (p.requires_grad or p._node is not None):
                continue
            key = id(p)
            if p._node is None:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for key, leaf in leaves.items():
        leaf.grad = np.array(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
    if params is not None:
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros(p.shape, dtype=p.dtype)
