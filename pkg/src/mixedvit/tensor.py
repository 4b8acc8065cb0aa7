"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable operation performed while it is
active (define-by-run); ``backward`` replays it in reverse and returns a
gradient for every node that was reached. The op inventory is exactly what
the two-branch transformer model needs -- nothing more.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "elementwise",
    "add",
    "sub",
    "mul",
    "matmul",
    "bmm",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "concat",
    "reshape",
    "transpose",
    "narrow",
    "tsum",
    "tlog",
    "clamp_min",
    "backward",
    "grad_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 n-d array, optionally tracked for gradients.

    ``grad`` is populated on leaves (requires_grad=True) by ``backward``.
    ``node_id``/``tape`` are set on op outputs recorded on an active tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents  # node ids (None for non-grad inputs)
        self.backward_fn = backward_fn  # upstream grad -> per-parent grads


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


class Tape:
    """Ordered op record for one forward pass. Parents precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}  # id(tensor) -> node id
        self._leaves: dict[int, Tensor] = {}  # node id -> leaf tensor

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def _leaf_node(self, t: Tensor) -> int:
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), lambda g: ()))
            self._leaf_ids[id(t)] = nid
            self._leaves[nid] = t
        return nid


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    """Wrap an op result, registering it on the active tape when needed."""
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is None or not out.requires_grad:
        return out
    parents = []
    for t in inputs:
        if not t.requires_grad:
            parents.append(None)
        elif t.tape is tape and t.node_id is not None:
            parents.append(t.node_id)
        else:
            parents.append(tape._leaf_node(t))
    nid = len(tape.nodes)
    tape.nodes.append(_Node(op, tuple(parents), backward_fn))
    out.node_id = nid
    out.tape = tape
    return out


def _check_broadcast(a_shape: tuple, b_shape: tuple) -> tuple:
    """Trailing-axis broadcast: size-1 axes stretch. Returns result shape."""
    out = []
    for da, db in zip(reversed(a_shape), reversed(b_shape)):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(
                f"cannot broadcast shapes {a_shape} and {b_shape}")
    longer = a_shape if len(a_shape) >= len(b_shape) else b_shape
    return tuple(longer[:abs(len(a_shape) - len(b_shape))]) + tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def elementwise(op_kind: str, a: Tensor, b: Tensor) -> Tensor:
    shape = _check_broadcast(a.shape, b.shape)
    del shape
    if op_kind == "add":
        out = a.data + b.data

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif op_kind == "sub":
        out = a.data - b.data

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    elif op_kind == "mul":
        out = a.data * b.data
        ad, bd = a.data, b.data

        def back(g):
            return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
    else:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return _record(op_kind, (a, b), out, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n) or batched (B,m,k)@(k,n)."""
    if a.data.ndim not in (2, 3) or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects rank-2..3 @ rank-2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = g @ bd.T
        if ad.ndim == 3:
            gb = np.einsum("bmk,bmn->kn", ad, g)
        else:
            gb = ad.T @ g
        return ga, gb

    return _record("matmul", (a, b), out, back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (B,m,k)@(B,k,n)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects two rank-3 tensors, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record("bmm", (a, b), out, back)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Last-axis normalization (population variance) followed by affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match last axis of {x.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def back(g):
        gg = g * gamma.data
        dx = inv_std * (gg - gg.mean(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, back)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact standard-normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), out, back)


def dropout(x: Tensor, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    out = x.data * keep

    def back(g):
        return (g * keep,)

    return _record("dropout", (x,), out, back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty tensor list")
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
                t.shape[i] != first[i] for i in range(len(first)) if i != axis % len(first)):
            raise ShapeError(
                f"concat shapes incompatible on axis {axis}: "
                f"{[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", tuple(tensors), out, back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))

    def back(g):
        return (g.reshape(old),)

    return _record("reshape", (x,), out, back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def back(g):
        return (g.transpose(inv),)

    return _record("transpose", (x,), out, back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(
            f"narrow [{start}, {start + length}) outside axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index]
    full_shape = x.shape

    def back(g):
        buf = np.zeros(full_shape)
        buf[index] = g
        return (buf,)

    return _record("narrow", (x,), out, back)


def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        out = x.data.sum()
        shape = x.shape

        def back(g):
            return (np.broadcast_to(g, shape).copy(),)
    else:
        out = x.data.sum(axis=axis)

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), back)


def tlog(x: Tensor) -> Tensor:
    out = np.log(x.data)
    xd = x.data

    def back(g):
        return (g / xd,)

    return _record("log", (x,), out, back)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = np.maximum(x.data, floor)
    passed = x.data >= floor

    def back(g):
        return (g * passed,)

    return _record("clamp_min", (x,), out, back)


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root. Returns node_id -> gradient.

    Leaf tensors with requires_grad also receive the gradient in ``.grad``.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    tape = root.tape
    if tape is None or root.node_id is None:
        raise ValueError("backward root is not attached to a tape")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op == "leaf":
            continue
        for pid, pg in zip(node.parents, node.backward_fn(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    for nid, leaf in tape._leaves.items():
        if nid in grads:
            leaf.grad = grads[nid]
    return grads


def grad_check(f: Callable[[Tensor], Tensor], theta: np.ndarray,
               eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a parameter tensor to a scalar Tensor and must be
    deterministic (dropout off or seed-fixed per call).
    """
    theta = np.asarray(theta, dtype=np.float64)
    with Tape():
        x = Tensor(theta, requires_grad=True)
        y = f(x)
    backward(y)
    analytic = np.zeros_like(theta) if x.grad is None else x.grad

    numeric = np.zeros_like(theta)
    flat = theta.reshape(-1)
    for i in range(flat.size):
        tp = flat.copy()
        tp[i] += eps
        tm = flat.copy()
        tm[i] -= eps
        fp = f(Tensor(tp.reshape(theta.shape))).item()
        fm = f(Tensor(tm.reshape(theta.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)

    err = np.abs(analytic - numeric)
    scale = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((err / scale).max()) if flat.size else 0.0
