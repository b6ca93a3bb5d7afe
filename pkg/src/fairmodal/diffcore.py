"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every operation in creation order, which is a valid
topological order, and replays it backwards to accumulate gradients.  The
backward rule of each operation is itself expressed in tape operations, so
gradients are ordinary :class:`Value` nodes and can be differentiated again.
That property is what lets the training losses penalise gradient alignment
directly instead of treating it as a frozen statistic.

Only the operations the models and losses actually use are provided; there
is no broadcasting magic beyond the explicit ``broadcast_to``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, InputError, ShapeError, StateError

LOG_FLOOR = 1e-12
COSINE_NORM_FLOOR = 1e-12


class Value:
    """One node of a taped computation.

    Holds the forward array, the gradient populated by a stateful reverse
    pass, and the hooks needed to propagate gradients to its parents.
    """

    __slots__ = ("tape", "data", "grad", "node_id", "param_id", "_parents", "_bwd")

    def __init__(
        self,
        tape: "Tape",
        data: np.ndarray,
        node_id: int,
        parents: tuple = (),
        bwd: Callable | None = None,
        param_id: str | None = None,
    ):
        self.tape = tape
        self.data = data
        self.grad: np.ndarray | None = None
        self.node_id = node_id
        self.param_id = param_id
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar value of shape {self.shape}")
        return float(self.data)

    def __add__(self, other: "Value") -> "Value":
        return add(self, other)

    def __sub__(self, other: "Value") -> "Value":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Value":
        return scale(self, float(other))

    def __matmul__(self, other: "Value") -> "Value":
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" param={self.param_id}" if self.param_id else ""
        return f"<Value #{self.node_id} shape={self.shape}{tag}>"


class Tape:
    """Ordered record of one differentiable computation.

    Nodes are appended in creation order (hence topological order).  The
    stateful reverse pass may run once per tape unless :meth:`reset` is
    called; the functional :meth:`grad` does not consume the tape and may
    be called repeatedly, each call appending the gradient subgraph it
    builds.  A tape is confined to one thread during forward/reverse.
    """

    def __init__(self):
        self.nodes: list[Value] = []
        self.leaves: dict[str, Value] = {}
        self._reversed = False

    def _node(self, data, parents=(), bwd=None, param_id=None) -> Value:
        arr = np.asarray(data, dtype=np.float64)
        v = Value(self, arr, len(self.nodes), parents, bwd, param_id)
        self.nodes.append(v)
        return v

    def leaf(self, data, param_id: str | None = None) -> Value:
        """Register an input node; named leaves appear in gradient maps."""
        if param_id is not None and param_id in self.leaves:
            raise ContractError(f"duplicate parameter id {param_id!r}")
        v = self._node(data, param_id=param_id)
        if param_id is not None:
            self.leaves[param_id] = v
        return v

    def const(self, data) -> Value:
        """An anonymous input node (no entry in the leaf registry)."""
        return self._node(data)

    def _sweep(self, output: Value) -> dict[int, Value]:
        """Reverse accumulation from ``output``; returns node-id -> grad Value."""
        grads: dict[int, Value] = {
            output.node_id: self.const(np.ones_like(output.data))
        }
        for nid in range(output.node_id, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node._bwd is None:
                continue
            for parent, contrib in zip(node._parents, node._bwd(g)):
                if contrib is None:
                    continue
                held = grads.get(parent.node_id)
                grads[parent.node_id] = contrib if held is None else add(held, contrib)
        return grads

    def backward(self, loss: Value) -> dict[str, np.ndarray]:
        """Stateful reverse pass from a scalar loss.

        Populates ``.grad`` on every reached node and returns an immutable
        map param-id -> gradient block covering all registered leaves
        (zeros for leaves the loss does not reach).
        """
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._reversed:
            raise StateError("tape already reversed; call reset() first")
        self._reversed = True
        grads = self._sweep(loss)
        for nid, gv in grads.items():
            self.nodes[nid].grad = gv.data
        out: dict[str, np.ndarray] = {}
        for pid, leaf_v in self.leaves.items():
            gv = grads.get(leaf_v.node_id)
            block = gv.data.copy() if gv is not None else np.zeros_like(leaf_v.data)
            block.flags.writeable = False
            out[pid] = block
            if leaf_v.grad is None:
                leaf_v.grad = np.zeros_like(leaf_v.data)
        return out

    def grad(self, output: Value, wrt: Sequence[Value]) -> list[Value]:
        """Functional gradients of a scalar ``output`` w.r.t. given nodes.

        Returns differentiable Values (zeros where unreached); does not
        touch ``.grad`` fields and does not consume the tape.
        """
        if output.size != 1:
            raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
        grads = self._sweep(output)
        return [
            grads.get(v.node_id) or self.const(np.zeros_like(v.data))
            for v in wrt
        ]

    def reset(self) -> None:
        """Clear gradients so another stateful reverse pass may run."""
        self._reversed = False
        for node in self.nodes:
            node.grad = None


def _same_tape(*values: Value) -> Tape:
    tape = values[0].tape
    for v in values[1:]:
        if v.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# elementwise operations


def add(a: Value, b: Value) -> Value:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return tape._node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return tape._node(a.data - b.data, (a, b), lambda g: (g, scale(g, -1.0)))


def mul(a: Value, b: Value) -> Value:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return tape._node(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return a.tape._node(a.data * c, (a,), lambda g: (scale(g, c),))


def shift(a: Value, c: float) -> Value:
    """Add a scalar constant elementwise."""
    return a.tape._node(a.data + float(c), (a,), lambda g: (g,))


def relu(x: Value) -> Value:
    mask = (x.data > 0).astype(np.float64)  # subgradient at 0 is 0

    def bwd(g):
        return (mul(g, x.tape.const(mask)),)

    return x.tape._node(np.maximum(x.data, 0.0), (x,), bwd)


def sigmoid(x: Value) -> Value:
    with np.errstate(over="ignore"):
        s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                     np.exp(x.data) / (1.0 + np.exp(x.data)))
    out = x.tape._node(s, (x,), None)
    out._bwd = lambda g: (mul(g, mul(out, shift(scale(out, -1.0), 1.0))),)
    return out


def exp(x: Value) -> Value:
    out = x.tape._node(np.exp(x.data), (x,), None)
    out._bwd = lambda g: (mul(g, out),)
    return out


def log(x: Value) -> Value:
    return x.tape._node(np.log(x.data), (x,), lambda g: (mul(g, reciprocal(x)),))


def reciprocal(x: Value) -> Value:
    out = x.tape._node(1.0 / x.data, (x,), None)
    out._bwd = lambda g: (scale(mul(mul(g, out), out), -1.0),)
    return out


def sqrt(x: Value) -> Value:
    out = x.tape._node(np.sqrt(x.data), (x,), None)
    out._bwd = lambda g: (scale(mul(g, reciprocal(out)), 0.5),)
    return out


def absval(x: Value) -> Value:
    sign = np.sign(x.data)  # 0 at 0: |.| subgradient pinned to 0

    def bwd(g):
        return (mul(g, x.tape.const(sign)),)

    return x.tape._node(np.abs(x.data), (x,), bwd)


def clamp_min(x: Value, floor: float) -> Value:
    mask = (x.data > floor).astype(np.float64)

    def bwd(g):
        return (mul(g, x.tape.const(mask)),)

    return x.tape._node(np.maximum(x.data, floor), (x,), bwd)


# ---------------------------------------------------------------------------
# structural operations


def matmul(a: Value, b: Value) -> Value:
    tape = _same_tape(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")

    def bwd(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return tape._node(a.data @ b.data, (a, b), bwd)


def bmm(a: Value, b: Value) -> Value:
    """Batched matmul over a leading batch axis: (B,r,k) @ (B,k,c)."""
    tape = _same_tape(a, b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm needs 3-d operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")

    def bwd(g):
        return (bmm(g, transpose(b, (0, 2, 1))), bmm(transpose(a, (0, 2, 1)), g))

    return tape._node(a.data @ b.data, (a, b), bwd)


def transpose(x: Value, axes: tuple[int, ...] | None = None) -> Value:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return x.tape._node(
        np.transpose(x.data, axes), (x,), lambda g: (transpose(g, inverse),)
    )


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    orig = x.shape
    return x.tape._node(
        x.data.reshape(shape), (x,), lambda g: (reshape(g, orig),)
    )


def concat(xs: Sequence[Value], axis: int = 0) -> Value:
    tape = _same_tape(*xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    # flat positions of each input block inside the output, for the backward
    layout = np.arange(out.size).reshape(out.shape)
    slots: list[np.ndarray] = []
    start = 0
    for x in xs:
        width = x.shape[axis]
        index = [slice(None)] * out.ndim
        index[axis] = slice(start, start + width)
        slots.append(layout[tuple(index)].ravel())
        start += width

    def bwd(g):
        return tuple(
            reshape(take(g, slot), x.shape) for x, slot in zip(xs, slots)
        )

    return tape._node(out, tuple(xs), bwd)


def take(x: Value, flat_index: np.ndarray) -> Value:
    """Gather elements by flat index; result is 1-d."""
    idx = np.asarray(flat_index, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise ShapeError("take index out of bounds")
    shape = x.shape

    def bwd(g):
        return (scatter(g, idx, shape),)

    return x.tape._node(x.data.ravel()[idx], (x,), bwd)


def scatter(src: Value, flat_index: np.ndarray, shape: tuple[int, ...]) -> Value:
    """Adjoint of take: add 1-d values into a zero array of ``shape``."""
    idx = np.asarray(flat_index, dtype=np.intp).ravel()
    out = np.zeros(int(np.prod(shape)), dtype=np.float64)
    np.add.at(out, idx, src.data.ravel())

    def bwd(g):
        return (take(g, idx),)

    return src.tape._node(out.reshape(shape), (src,), bwd)


def broadcast_to(x: Value, shape: tuple[int, ...]) -> Value:
    shape = tuple(shape)
    padded = (1,) * (len(shape) - x.data.ndim) + x.shape
    if len(padded) != len(shape):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    summed_axes = tuple(
        i for i, (p, s) in enumerate(zip(padded, shape)) if p == 1 and s != 1
    )
    if any(p not in (1, s) for p, s in zip(padded, shape)):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    orig = x.shape

    def bwd(g):
        reduced = sum_axes(g, summed_axes, keepdims=True) if summed_axes else g
        return (reshape(reduced, orig),)

    return x.tape._node(
        np.broadcast_to(x.data, shape).copy(), (x,), bwd
    )


def sum_axes(x: Value, axes: tuple[int, ...] | None = None, keepdims: bool = False) -> Value:
    if axes is None:
        axes = tuple(range(x.data.ndim))
    axes = tuple(a % max(x.data.ndim, 1) for a in axes)
    kept = tuple(
        1 if i in axes else n for i, n in enumerate(x.shape)
    )
    orig = x.shape

    def bwd(g):
        return (broadcast_to(reshape(g, kept), orig),)

    return x.tape._node(x.data.sum(axis=axes, keepdims=keepdims), (x,), bwd)


def sum_all(x: Value) -> Value:
    return sum_axes(x, None, keepdims=False)


def mean_all(x: Value) -> Value:
    return scale(sum_all(x), 1.0 / x.size)


def mean_axis(x: Value, axis: int) -> Value:
    return scale(sum_axes(x, (axis,), keepdims=False), 1.0 / x.shape[axis])


# ---------------------------------------------------------------------------
# composite operations used by the models and losses


def softmax_rows(x: Value) -> Value:
    """Row softmax of a 2-d array, computed with max-subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-d input, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = x.tape._node(p, (x,), None)

    def bwd(g):
        weighted = mul(g, out)
        row = sum_axes(weighted, (1,), keepdims=True)
        return (mul(sub(g, broadcast_to(row, g.shape)), out),)

    out._bwd = bwd
    return out


def cross_entropy(probs: Value, labels: np.ndarray) -> Value:
    """Mean negative log-likelihood of integer labels under row probabilities.

    Probabilities are floored at ``LOG_FLOOR`` before the log so saturated
    predictions stay finite.
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-d probabilities, got {probs.shape}")
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"label out of range [0, {c})")
    idx = np.arange(n) * c + labels.astype(np.intp)
    picked = take(probs, idx)
    return scale(sum_all(log(clamp_min(picked, LOG_FLOOR))), -1.0 / n)


def flat_cosine(g1: np.ndarray, g2: np.ndarray) -> float:
    """Cosine similarity of two gradient blocks, affinely mapped to [0, 1].

    Raw cosine spans [-1, 1]; the remap (cos+1)/2 preserves ordering.  A
    near-zero norm on either side yields the neutral value 0.5.
    """
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.asarray(g2, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"flat_cosine lengths differ: {a.size} vs {b.size}")
    na = float(a @ a)
    nb = float(b @ b)
    if na < COSINE_NORM_FLOOR**2 or nb < COSINE_NORM_FLOOR**2:
        return 0.5
    c = float(a @ b) / np.sqrt(na * nb)
    return 0.5 * (min(1.0, max(-1.0, c)) + 1.0)


def cosine01(a: Value, b: Value) -> Value:
    """Differentiable counterpart of :func:`flat_cosine`.

    Falls back to a constant 0.5 when either operand currently has a
    near-zero norm, matching the float version's neutral convention.
    """
    if a.size != b.size:
        raise ShapeError(f"cosine01 lengths differ: {a.size} vs {b.size}")
    af = reshape(a, (a.size,))
    bf = reshape(b, (b.size,))
    na = sum_all(mul(af, af))
    nb = sum_all(mul(bf, bf))
    if na.item() < COSINE_NORM_FLOOR**2 or nb.item() < COSINE_NORM_FLOOR**2:
        return a.tape.const(0.5)
    dot = sum_all(mul(af, bf))
    c = mul(dot, reciprocal(sqrt(mul(na, nb))))
    return shift(scale(c, 0.5), 0.5)
