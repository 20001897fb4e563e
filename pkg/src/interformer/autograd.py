"""Dense 2-D tensors with reverse-mode differentiation.

A tensor is a single matrix ``(rows, cols)`` or a batch of matrices
``(batch, rows, cols)`` sharing one shape. The batch axis only exists so that
per-example matrix programs run vectorised; every op acts on the trailing two
axes. A 2-D operand of ``matmul`` is shared across the batch (weights), and its
gradient is summed over the batch. All other shape coercions are explicit ops
(``bias_add``, ``broadcast_batch``); nothing broadcasts silently.

Nodes are numbered at creation, so creation order is a topological order of
the computation graph. ``backward`` walks reachable nodes in reverse of that
order and visits each exactly once.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateAttentionError, DimensionError, NonFiniteError

_seq = itertools.count()

ACTIVATIONS = ("sigmoid", "tanh", "relu", "swish", "identity")


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction is NaN/Inf whenever any entry is; confirm before raising
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim not in (2, 3):
            raise DimensionError(f"tensors are 2-D or batched 2-D, got shape {arr.shape}")
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_seq)

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = op
        out._id = next(_seq)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def batched(self) -> bool:
        return self.data.ndim == 3

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# graph traversal


def graph_nodes(loss: Tensor) -> list:
    """Nodes reachable from ``loss`` that carry gradient, in creation order."""
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._id)


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    When ``leaves`` is given, any of them not reached get a zero gradient.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# linear algebra


def _unbatch(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if g.ndim == 3 and like.ndim == 2:
        return g.sum(axis=0)
    return g


def _left_shared(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A @ B_b`` for every batch item as one GEMM (``A`` 2-D, ``B`` 3-D)."""
    nb, k, c = B.shape
    out = A @ B.transpose(1, 0, 2).reshape(k, nb * c)
    return out.reshape(A.shape[0], nb, c).transpose(1, 0, 2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.batched and b.batched and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes differ {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    if A.ndim == 3 and B.ndim == 2:
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[-1],))
    elif A.ndim == 2 and B.ndim == 3:
        out = _left_shared(A, B)
    else:
        out = A @ B

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if A.ndim == 2 and B.ndim == 3:
                # shared left weight: sum_b g_b B_b^T
                nb, r, c = g.shape
                ga = g.transpose(1, 0, 2).reshape(r, nb * c) @ B.transpose(1, 0, 2).reshape(B.shape[1], nb * c).T
            elif A.ndim == 3 and B.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ B.T).reshape(A.shape)
            else:
                ga = g @ np.swapaxes(B, -1, -2)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim == 3:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif B.ndim == 3 and A.ndim == 2:
                gb = _left_shared(A.T, g)
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return Tensor._make(out, (a, b), back, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape(a, b, "hadamard")
    A, B = a.data, b.data
    return Tensor._make(A * B, (a, b), lambda g: (g * B, g * A), "hadamard")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "hadamard": mul}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    return Tensor._make(x.data + c, (x,), lambda g: (g,), "shift")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a row vector ``(1, cols)`` to every row, or a column vector
    ``(rows, 1)`` to every column, of each matrix in ``x``."""
    if b.batched:
        raise DimensionError("bias_add: bias must be 2-D")
    if b.shape == (1, x.cols):
        axes = (-2,)
    elif b.shape == (x.rows, 1):
        axes = (-1,)
    else:
        raise DimensionError(f"bias_add: bias {b.shape} does not fit {x.shape}")
    lead = (0,) if x.batched else ()

    def back(g):
        return g, g.sum(axis=lead + axes, keepdims=False).reshape(b.shape)

    return Tensor._make(x.data + b.data, (x, b), back, "bias_add")


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat a 2-D tensor along a new batch axis."""
    if x.batched:
        raise DimensionError("broadcast_batch: already batched")
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return Tensor._make(out, (x,), lambda g: (g.sum(axis=0),), "broadcast_batch")


def transpose(x: Tensor) -> Tensor:
    return Tensor._make(np.swapaxes(x.data, -1, -2).copy(), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    if out.ndim not in (2, 3):
        raise DimensionError(f"reshape: target {shape} is not 2-D or batched 2-D")
    return Tensor._make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Batched ``(B, r, c)`` to ``(B, r*c)`` in row-major order; 2-D to ``(1, r*c)``."""
    if x.batched:
        return reshape(x, (x.shape[0], x.rows * x.cols))
    return reshape(x, (1, x.rows * x.cols))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along columns (``axis=-1``) or rows (``axis=-2``)."""
    if axis not in (-1, -2):
        raise ContractError("concat axis must be -1 (columns) or -2 (rows)")
    tensors = [t for t in tensors if t.shape[axis] > 0] or list(tensors[:1])
    if len(tensors) == 1:
        return tensors[0]
    other = -2 if axis == -1 else -1
    ref = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != ref.data.ndim or t.shape[other] != ref.shape[other] or (
            t.batched and t.shape[0] != ref.shape[0]
        ):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        if axis == -1:
            return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
        return tuple(g[..., bounds[i]:bounds[i + 1], :] for i in range(len(tensors)))

    return Tensor._make(out, tensors, back, "concat")


def take(x: Tensor, index, axis: int = -1) -> Tensor:
    """Select columns (``axis=-1``) or rows (``axis=-2``) by integer index."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError("take: index must be 1-D")
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"take: index out of range for size {n}")
    out = np.take(x.data, idx, axis=axis)
    unique = np.unique(idx % n).size == idx.size

    def back(g):
        gx = np.zeros_like(x.data)
        where = (Ellipsis, idx) if axis == -1 else (Ellipsis, idx, slice(None))
        if unique:
            gx[where] = g
        else:
            np.add.at(gx, where, g)
        return (gx,)

    return Tensor._make(out, (x,), back, "take")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.cols:
        raise DimensionError(f"slice_cols: [{start}, {stop}) outside {x.cols} columns")
    out = x.data[..., start:stop].copy()

    def back(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return Tensor._make(out, (x,), back, "slice_cols")


def take_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` at integer ``index``.

    ``index`` of shape ``(B,)`` gives ``(B, dim)``; ``(B, T)`` gives
    ``(B, T, dim)``.
    """
    if table.batched:
        raise DimensionError("take_rows: table must be 2-D")
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim not in (1, 2):
        raise ContractError("take_rows: index must be 1-D or 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        bad = idx[(idx < 0) | (idx >= table.rows)].reshape(-1)[0]
        raise DimensionError(f"take_rows: index {int(bad)} outside vocabulary of {table.rows}")
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.cols))
        return (gt,)

    return Tensor._make(out, (table,), back, "take_rows")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._make(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def rotate_pairs(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate column pairs ``(2i, 2i+1)`` of row ``t`` by ``angles[t, i]``."""
    if x.cols % 2:
        raise DimensionError(f"rotate_pairs: odd width {x.cols}")
    ang = np.asarray(angles, dtype=np.float64)
    if ang.shape != (x.rows, x.cols // 2):
        raise DimensionError(f"rotate_pairs: angles {ang.shape} do not fit {x.shape}")
    c, s = np.cos(ang), np.sin(ang)
    z = x.data
    ze, zo = z[..., 0::2], z[..., 1::2]
    out = np.empty_like(z)
    out[..., 0::2] = ze * c - zo * s
    out[..., 1::2] = ze * s + zo * c

    def back(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = go * c - ge * s
        return (gx,)

    return Tensor._make(out, (x,), back, "rotate_pairs")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def activation(x: Tensor, kind: str) -> Tensor:
    z = x.data
    if kind == "identity":
        return x
    if kind == "sigmoid":
        y = _sigmoid(z)
        return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")
    if kind == "tanh":
        y = np.tanh(z)
        return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")
    if kind == "relu":
        pos = z > 0
        return Tensor._make(np.where(pos, z, 0.0), (x,), lambda g: (g * pos,), "relu")
    if kind == "swish":
        s = _sigmoid(z)
        return Tensor._make(z * s, (x,), lambda g: (g * (s + z * s * (1.0 - s)),), "swish")
    raise ContractError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    z = x.data
    return Tensor._make(np.log(z), (x,), lambda g: (g / z,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    z = x.data
    inside = (z >= lo) & (z <= hi)
    return Tensor._make(np.clip(z, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax over the last axis.

    ``mask`` (broadcastable to ``x``) marks valid entries; invalid entries act
    as ``-inf`` logits and get exactly zero weight.
    """
    z = x.data
    if mask is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        valid = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(valid, z.shape).any(axis=-1).all():
            raise DegenerateAttentionError("every key is masked for at least one query row")
        zm = np.where(valid, z, -np.inf)
        e = np.exp(zm - zm.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise every row to zero mean and unit variance, then scale/shift."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise DimensionError(f"layer_norm: gamma/beta must be (1, {x.cols})")
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G, Bt = gamma.data, beta.data
    out = xhat * G + Bt
    n = x.cols
    lead = tuple(range(z.ndim - 1))

    def back(g):
        gxhat = g * G
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead).reshape(1, n)
        gbeta = g.sum(axis=lead).reshape(1, n)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), back, "layer_norm")
