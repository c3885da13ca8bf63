"""Reverse-mode automatic differentiation over 2-D float64 arrays.

Every tensor in the graph is a rank-2 numpy array (batches are rows,
features are columns; scalars live as shape (1, 1)).  A Tape records
nodes in creation order, which is already a topological order, so the
backward pass is a single reverse sweep.  Broadcasting is deliberately
narrow: a (1, c) row or a (1, 1) scalar may broadcast against an (n, c)
operand in add/sub/mul, nothing else.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "matmul",
    "affine",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "leaky_relu",
    "exp",
    "log",
    "square",
    "clamp",
    "sum_all",
    "sum_rows",
    "sum_cols",
    "mean_all",
    "concat_cols",
    "slice_cols",
    "repeat_rows",
    "reshape",
    "logsumexp_rows",
    "gaussian",
]


def _as_matrix(value) -> np.ndarray:
    """Coerce input to a C-contiguous 2-D float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"expected scalar, vector or matrix, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


class Node:
    """One value in the computation graph."""

    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        tape: "Tape",
        value: np.ndarray,
        parents: Sequence["Node"] = (),
        backward_fn: Optional[Callable[[], None]] = None,
        op: str = "const",
    ):
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by op '{op}'")
        self.tape = tape
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        # first write copies (g may be a read-only broadcast view), later
        # writes accumulate in place
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of operations; supports one backward sweep per loss."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}

    def constant(self, value, op: str = "const") -> Node:
        return Node(self, _as_matrix(value), op=op)

    def leaf(self, param) -> Node:
        """Graph entry point for a Parameter; cached so repeated calls share the node."""
        key = id(param)
        node = self._leaves.get(key)
        if node is None:
            node = Node(self, _as_matrix(param.value), op=f"leaf:{param.name}")
            self._leaves[key] = node
        return node

    def backward(self, loss: Node) -> None:
        """Populate .grad on every node that loss depends on.

        Nodes outside the loss subgraph keep grad None (read as zero).
        """
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.shape != (1, 1):
            raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")

        # Mark ancestors of the loss so the sweep skips unrelated nodes.
        needed: set[int] = set()
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in needed:
                continue
            needed.add(id(node))
            stack.extend(node.parents)

        loss.accumulate(np.ones((1, 1)))
        for node in reversed(self.nodes):
            if id(node) not in needed or node.backward_fn is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.backward_fn()

    def grad_for(self, param) -> np.ndarray:
        """Gradient of the last backward'd loss w.r.t. a Parameter (zeros if unused)."""
        node = self._leaves.get(id(param))
        if node is None or node.grad is None:
            return np.zeros_like(_as_matrix(param.value))
        return node.grad


def _coerce(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the row/column/scalar shape it was broadcast from."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum(keepdims=True).reshape(1, 1)
    if shape[0] == 1 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[0] == shape[0]:
        return g.sum(axis=1, keepdims=True)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a: Node, b: Node, op: str) -> tuple:
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return sa
    if sb == (1, 1):
        return sa
    if sa == (1, 1):
        return sb
    if sb[0] == 1 and sb[1] == sa[1]:
        return sa
    if sa[0] == 1 and sa[1] == sb[1]:
        return sb
    if sb[1] == 1 and sb[0] == sa[0]:
        return sa
    if sa[1] == 1 and sa[0] == sb[0]:
        return sb
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.value.shape} @ {b.value.shape}")
    out = Node(a.tape, a.value @ b.value, (a, b), op="matmul")

    def backward():
        a.accumulate(out.grad @ b.value.T)
        b.accumulate(a.value.T @ out.grad)

    out.backward_fn = backward
    return out


def add(a: Node, b) -> Node:
    b = _coerce(a.tape, b)
    _check_broadcast(a, b, "add")
    out = Node(a.tape, a.value + b.value, (a, b), op="add")

    def backward():
        a.accumulate(_unbroadcast(out.grad, a.value.shape))
        b.accumulate(_unbroadcast(out.grad, b.value.shape))

    out.backward_fn = backward
    return out


def sub(a: Node, b) -> Node:
    b = _coerce(a.tape, b)
    _check_broadcast(a, b, "sub")
    out = Node(a.tape, a.value - b.value, (a, b), op="sub")

    def backward():
        a.accumulate(_unbroadcast(out.grad, a.value.shape))
        b.accumulate(_unbroadcast(-out.grad, b.value.shape))

    out.backward_fn = backward
    return out


def mul(a: Node, b) -> Node:
    b = _coerce(a.tape, b)
    _check_broadcast(a, b, "mul")
    out = Node(a.tape, a.value * b.value, (a, b), op="mul")

    def backward():
        a.accumulate(_unbroadcast(out.grad * b.value, a.value.shape))
        b.accumulate(_unbroadcast(out.grad * a.value, b.value.shape))

    out.backward_fn = backward
    return out


def neg(a: Node) -> Node:
    out = Node(a.tape, -a.value, (a,), op="neg")
    out.backward_fn = lambda: a.accumulate(-out.grad)
    return out


def scale(a: Node, k: float) -> Node:
    k = float(k)
    out = Node(a.tape, a.value * k, (a,), op="scale")
    out.backward_fn = lambda: a.accumulate(out.grad * k)
    return out


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b with a (1, out) bias row; fused to keep the tape small."""
    if x.value.shape[1] != w.value.shape[0]:
        raise ValueError(f"affine: inner dims differ, {x.value.shape} @ {w.value.shape}")
    if b.value.shape != (1, w.value.shape[1]):
        raise ValueError(f"affine: bias shape {b.value.shape} does not match output width {w.value.shape[1]}")
    val = x.value @ w.value
    val += b.value
    out = Node(x.tape, val, (x, w, b), op="affine")

    def backward():
        g = out.grad
        x.accumulate(g @ w.value.T)
        w.accumulate(x.value.T @ g)
        b.accumulate(g.sum(axis=0, keepdims=True))

    out.backward_fn = backward
    return out


def leaky_relu(a: Node, slope: float) -> Node:
    if not (0.0 < slope <= 1.0):
        raise ValueError(f"leaky_relu slope must be in (0, 1], got {slope}")
    # max(x, slope*x) is the same function for slope <= 1; derivative at
    # exactly zero follows the positive branch
    out = Node(a.tape, np.maximum(a.value, a.value * slope), (a,), op="leaky_relu")
    neg_mask = a.value < 0.0

    def backward():
        g = out.grad
        a.accumulate(np.where(neg_mask, g * slope, g))

    out.backward_fn = backward
    return out


def exp(a: Node) -> Node:
    out = Node(a.tape, np.exp(a.value), (a,), op="exp")
    out.backward_fn = lambda: a.accumulate(out.grad * out.value)
    return out


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise FloatingPointError("log: input must be strictly positive")
    out = Node(a.tape, np.log(a.value), (a,), op="log")
    out.backward_fn = lambda: a.accumulate(out.grad / a.value)
    return out


def square(a: Node) -> Node:
    out = Node(a.tape, a.value * a.value, (a,), op="square")
    out.backward_fn = lambda: a.accumulate(out.grad * 2.0 * a.value)
    return out


def clamp(a: Node, lo: float, hi: float) -> Node:
    if lo >= hi:
        raise ValueError(f"clamp: lo must be < hi, got [{lo}, {hi}]")
    mask = (a.value >= lo) & (a.value <= hi)
    out = Node(a.tape, np.clip(a.value, lo, hi), (a,), op="clamp")
    out.backward_fn = lambda: a.accumulate(out.grad * mask)
    return out


def sum_all(a: Node) -> Node:
    out = Node(a.tape, a.value.sum(keepdims=True).reshape(1, 1), (a,), op="sum_all")
    out.backward_fn = lambda: a.accumulate(np.broadcast_to(out.grad, a.value.shape))
    return out


def sum_rows(a: Node) -> Node:
    """Sum along axis 1: (n, c) -> (n, 1)."""
    out = Node(a.tape, a.value.sum(axis=1, keepdims=True), (a,), op="sum_rows")
    out.backward_fn = lambda: a.accumulate(np.broadcast_to(out.grad, a.value.shape))
    return out


def sum_cols(a: Node) -> Node:
    """Sum along axis 0: (n, c) -> (1, c)."""
    out = Node(a.tape, a.value.sum(axis=0, keepdims=True), (a,), op="sum_cols")
    out.backward_fn = lambda: a.accumulate(np.broadcast_to(out.grad, a.value.shape))
    return out


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = Node(a.tape, a.value.mean(keepdims=True).reshape(1, 1), (a,), op="mean_all")
    out.backward_fn = lambda: a.accumulate(np.broadcast_to(out.grad / n, a.value.shape))
    return out


def concat_cols(nodes: Sequence[Node]) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ValueError("concat_cols: empty input")
    tape = nodes[0].tape
    rows = nodes[0].value.shape[0]
    for nd in nodes:
        if nd.value.shape[0] != rows:
            raise ValueError("concat_cols: row counts differ")
    out = Node(tape, np.concatenate([nd.value for nd in nodes], axis=1), nodes, op="concat_cols")
    widths = [nd.value.shape[1] for nd in nodes]

    def backward():
        j = 0
        for nd, w in zip(nodes, widths):
            nd.accumulate(out.grad[:, j : j + w])
            j += w

    out.backward_fn = backward
    return out


def slice_cols(a: Node, j0: int, j1: int) -> Node:
    if not (0 <= j0 < j1 <= a.value.shape[1]):
        raise ValueError(f"slice_cols: bad range [{j0}, {j1}) for width {a.value.shape[1]}")
    out = Node(a.tape, a.value[:, j0:j1].copy(), (a,), op="slice_cols")

    def backward():
        g = np.zeros_like(a.value)
        g[:, j0:j1] = out.grad
        a.accumulate(g)

    out.backward_fn = backward
    return out


def repeat_rows(a: Node, k: int) -> Node:
    """Repeat each row k times consecutively: (n, c) -> (n*k, c)."""
    if k < 1:
        raise ValueError(f"repeat_rows: k must be >= 1, got {k}")
    n, c = a.value.shape
    out = Node(a.tape, np.repeat(a.value, k, axis=0), (a,), op="repeat_rows")
    out.backward_fn = lambda: a.accumulate(out.grad.reshape(n, k, c).sum(axis=1))
    return out


def reshape(a: Node, rows: int, cols: int) -> Node:
    if rows * cols != a.value.size:
        raise ValueError(f"reshape: cannot view {a.value.shape} as ({rows}, {cols})")
    out = Node(a.tape, a.value.reshape(rows, cols), (a,), op="reshape")
    out.backward_fn = lambda: a.accumulate(out.grad.reshape(a.value.shape))
    return out


def logsumexp_rows(a: Node) -> Node:
    """Row-wise log(sum(exp(.))): (n, c) -> (n, 1), shift-stabilized."""
    m = a.value.max(axis=1, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=1, keepdims=True)
    out = Node(a.tape, m + np.log(total), (a,), op="logsumexp_rows")
    softmax = shifted / total
    out.backward_fn = lambda: a.accumulate(out.grad * softmax)
    return out


def gaussian(mean: Node, log_std: Node, eps: np.ndarray, lo: float = -20.0, hi: float = 5.0) -> Node:
    """Reparameterized draw mean + exp(clamp(log_std)) * eps with eps held fixed.

    eps must be a plain array shaped like the broadcast of mean/log_std
    against it; gradients flow to mean and log_std only.
    """
    if mean.value.shape != log_std.value.shape:
        raise ValueError("gaussian: mean and log_std shapes differ")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[1] != mean.value.shape[1]:
        raise ValueError(f"gaussian: eps shape {eps.shape} incompatible with {mean.value.shape}")
    if mean.value.shape[0] not in (1, eps.shape[0]):
        raise ValueError(f"gaussian: eps rows {eps.shape[0]} incompatible with {mean.value.shape}")
    if not np.all(np.isfinite(eps)):
        raise FloatingPointError("gaussian: non-finite eps")
    ls = np.clip(log_std.value, lo, hi)
    mask = (log_std.value >= lo) & (log_std.value <= hi)
    sigma_eps = np.exp(ls) * eps
    out = Node(mean.tape, mean.value + sigma_eps, (mean, log_std), op="gaussian")

    def backward():
        mean.accumulate(_unbroadcast(out.grad, mean.value.shape))
        log_std.accumulate(_unbroadcast(out.grad * sigma_eps * mask, log_std.value.shape))

    out.backward_fn = backward
    return out
