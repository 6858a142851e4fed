"""Dense float64 tensors with reverse-mode automatic differentiation.

Small tape-style engine over numpy arrays: every operation returns a new
Tensor that remembers its parents and how to push gradients back to them.
Only the shape rules the model actually needs are supported (same-shape
elementwise ops, trailing-vector affine broadcast, stacked matmul); anything
else is rejected up front. Every op checks its output for NaN/Inf so a
diverging computation fails at the op that produced it.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Raised when an op produces NaN/Inf or is called with invalid shapes."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NumericsError(f"non-finite values produced by op '{op}'")
    return data


class Tensor:
    """A node in the computation graph.

    `data` is always a float64 ndarray. `grad` is populated by backward()
    for nodes with requires_grad. Parents and the local backward closure are
    only retained while gradients are enabled and some input requires them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 op: str = "leaf", backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        if _grad_enabled and (requires_grad or any(p.requires_grad for p in parents)):
            self.requires_grad = True
            self._parents = parents
            self._backward = backward_fn
        else:
            self._parents = ()
            self._backward = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def _accum(self, g: np.ndarray, own: bool = False):
        """Accumulate a gradient contribution.

        own=True asserts `g` was freshly allocated for this node alone, so it
        may be adopted without a defensive copy; shared or view arrays (e.g.
        the same upstream grad fanned out by add/reshape) must use own=False.
        """
        if self.grad is None:
            self.grad = g if own else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from this scalar node.

        Visits each node of the trace exactly once, in reverse topological
        order, accumulating gradients into every reachable node that
        requires them.
        """
        if self.data.size != 1:
            raise NumericsError(f"backward root must be scalar, got shape {self.shape}")
        order = trace(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def item(self) -> float:
        return float(self.data.reshape(()))


class Parameter(Tensor):
    """Trainable leaf tensor addressed by a structured path string."""

    __slots__ = ("path",)

    def __init__(self, data, path: str = ""):
        super().__init__(data, requires_grad=True, op="param")
        self.path = path

    def __repr__(self):
        return f"Parameter(path={self.path!r}, shape={self.shape})"


def tensor(data) -> Tensor:
    """Wrap raw data as a constant (non-grad) Tensor."""
    return Tensor(data)


def trace(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below `root` (parents before children)."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Module-level alias for Tensor.backward()."""
    root.backward()


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # reduce a gradient over the leading axes introduced by trailing broadcast
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    """Elementwise sum. `b` may be trailing-aligned (e.g. a row vector bias)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and (b.data.ndim > a.data.ndim
                               or b.shape != a.shape[a.data.ndim - b.data.ndim:]):
        raise NumericsError(f"add: shapes {a.shape} and {b.shape} incompatible")
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(g)
        if b.requires_grad or b._parents:
            b._accum(_sum_to_shape(g, b.shape), own=g.shape != b.shape)

    return Tensor(out_data, parents=(a, b), op="add", backward_fn=bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(-g, own=True)

    return Tensor(-a.data, parents=(a,), op="neg", backward_fn=bw)


def mul(a, b) -> Tensor:
    """Elementwise product; `b` may be a python scalar or same-shape tensor."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def bw_s(g):
            a._accum(g * c)

        return Tensor(a.data * c, parents=(a,), op="mul", backward_fn=bw_s)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise NumericsError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(g * b.data, own=True)
        if b.requires_grad or b._parents:
            b._accum(g * a.data, own=True)

    return Tensor(a.data * b.data, parents=(a, b), op="mul", backward_fn=bw)


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported forms: (m,k)@(k,n); (...,m,k)@(k,n) with a 2-D weight on the
    right; and (...,m,k)@(...,k,n) with identical leading dims (attention).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise NumericsError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul: inner extents {a.shape} x {b.shape} mismatch")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise NumericsError(f"matmul: stacked dims {a.shape} x {b.shape} mismatch")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(g @ np.swapaxes(b.data, -1, -2), own=True)
        if b.requires_grad or b._parents:
            if b.data.ndim == 2 and a.data.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accum(a2.T @ g2, own=True)
            else:
                b._accum(np.swapaxes(a.data, -1, -2) @ g, own=True)

    return Tensor(out_data, parents=(a, b), op="matmul", backward_fn=bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), op="reshape", backward_fn=bw)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(np.swapaxes(g, ax1, ax2))

    return Tensor(np.swapaxes(a.data, ax1, ax2), parents=(a,), op="swapaxes",
                  backward_fn=bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask, own=True)

    return Tensor(np.maximum(a.data, 0.0), parents=(a,), op="relu", backward_fn=bw)


def sum_all(a) -> Tensor:
    """Full reduction to a scalar."""
    a = _as_tensor(a)

    def bw(g):
        a._accum(np.full(a.shape, float(g)), own=True)

    return Tensor(a.data.sum(), parents=(a,), op="sum", backward_fn=bw)


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax over the last axis.

    `mask` is an optional boolean array broadcastable to x.shape with True at
    valid positions; invalid positions get exactly 0 probability and the row
    normalizes over the valid ones. Rows with no valid entry are rejected.
    """
    x = _as_tensor(x)
    if x.data.ndim < 1 or x.shape[-1] == 0:
        raise NumericsError("softmax_rows: empty rows")
    data = x.data
    if mask is not None:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not valid.any(axis=-1).all():
            raise NumericsError("softmax_rows: row with no valid positions")
        shifted = np.where(valid, data, -np.inf)
        rowmax = shifted.max(axis=-1, keepdims=True)
        e = np.zeros_like(data)
        np.exp(data - rowmax, out=e, where=valid)
    else:
        rowmax = data.max(axis=-1, keepdims=True)
        e = np.exp(data - rowmax)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        x._accum(s * (g - dot), own=True)

    return Tensor(s, parents=(x,), op="softmax_rows", backward_fn=bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) normalization followed by the affine gain/bias."""
    if eps <= 0:
        raise NumericsError("layer_norm: eps must be > 0")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise NumericsError("layer_norm: gain/bias must match the last extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad or gain._parents:
            gain._accum(_sum_to_shape(g * xhat, gain.shape), own=True)
        if bias.requires_grad or bias._parents:
            bias._accum(_sum_to_shape(g, bias.shape), own=g.shape != bias.shape)
        if x.requires_grad or x._parents:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum((dxhat - m1 - xhat * m2) * inv, own=True)

    return Tensor(out, parents=(x, gain, bias), op="layer_norm", backward_fn=bw)


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log softmax probability over non-ignored positions.

    logits: (..., V); targets: integer array of shape logits.shape[:-1], each
    in [0, V) or equal to ignore_index.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise NumericsError(f"cross_entropy: target shape {t.shape} does not "
                            f"match logits {logits.shape}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tf = t.reshape(-1)
    keep = tf != ignore_index
    n_valid = int(keep.sum())
    if n_valid == 0:
        raise NumericsError("cross_entropy: all positions ignored")
    if ((tf[keep] < 0) | (tf[keep] >= V)).any():
        raise NumericsError("cross_entropy: target id out of range")
    rowmax = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - rowmax)
    esum = e.sum(axis=-1, keepdims=True)
    lse = np.log(esum[:, 0]) + rowmax[:, 0]
    safe_t = np.where(keep, tf, 0)
    picked = flat[np.arange(flat.shape[0]), safe_t]
    losses = np.where(keep, lse - picked, 0.0)
    out = losses.sum() / n_valid

    def bw(g):
        p = e / esum
        p[np.arange(flat.shape[0]), safe_t] -= 1.0
        p[~keep] = 0.0
        logits._accum((float(g) / n_valid) * p.reshape(logits.shape), own=True)

    return Tensor(out, parents=(logits,), op="cross_entropy", backward_fn=bw)


def embedding(table, ids) -> Tensor:
    """Row gather from a (V, d) table; gradient is a scatter-add."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise NumericsError(f"embedding: id out of range for table of {V} rows")

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(acc, own=True)

    return Tensor(table.data[idx], parents=(table,), op="embedding", backward_fn=bw)
