"""Reverse-mode automatic differentiation over dense 2-D matrices.

A deliberately small engine: values are 2-D NumPy arrays (float64 by
default, float32 only for low-precision experiments), each op appends a
`Node` to a per-batch graph, and `backward` runs one vector-Jacobian
product per node in reverse topological order. Graphs are rebuilt for
every batch; nothing is retained across training steps.

Broadcasting is restricted to scalar-with-matrix and row-vector
expansion so that every backward rule stays enumerable and testable.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "exp",
    "log",
    "relu",
    "transpose",
    "reshape",
    "row_sum",
    "row_mean",
    "sum_all",
    "mean_all",
    "diag_part",
    "offdiag",
    "l2_normalize_rows",
    "logsumexp_row",
    "detach",
    "backward",
    "finite_difference_grad",
    "as_matrix",
    "column",
]

_FLOAT_DTYPES = (np.float32, np.float64)


def as_matrix(data, dtype=None) -> np.ndarray:
    """Coerce scalars / 1-D / 2-D input to a 2-D float array (row-major)."""
    arr = np.array(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"expected scalar, 1-D or 2-D data, got ndim={arr.ndim}")
    return arr


def column(data, dtype=None) -> np.ndarray:
    """Coerce a length-n vector to an n-by-1 column array."""
    arr = as_matrix(data, dtype)
    if arr.shape[0] == 1 and arr.shape[1] > 1:
        arr = arr.T.copy()
    return arr


class Node:
    """One matrix value in the computation graph.

    `value` is treated as immutable once the node exists. `grad` is filled
    by `backward` for every node reachable from the root that requires
    gradient; a detached node never propagates gradient to its inputs.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value: np.ndarray, parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Node, ...] = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a 1x1 node, got shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Node:
    """A leaf that never receives gradient."""
    return Node(as_matrix(data, dtype))


def parameter(data, dtype=None) -> Node:
    """A leaf whose gradient is accumulated by `backward`."""
    return Node(as_matrix(data, dtype), requires_grad=True)


def _make(value, parents, vjp) -> Node:
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Node(value)
    return Node(value, parents, vjp, requires_grad=True)


def _require_same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Node, b) -> Node:
    """a + b with b a same-shape node, a 1-by-C row node, or a scalar."""
    if isinstance(b, Node):
        if a.shape == b.shape:
            return _make(a.value + b.value, (a, b), lambda g: (g, g))
        if b.shape == (1, a.shape[1]):
            return _make(
                a.value + b.value,
                (a, b),
                lambda g: (g, g.sum(axis=0, keepdims=True)),
            )
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value + float(b), (a,), lambda g: (g,))


def sub(a: Node, b) -> Node:
    """a - b, with the same operand rules as `add`."""
    if isinstance(b, Node):
        if a.shape == b.shape:
            return _make(a.value - b.value, (a, b), lambda g: (g, -g))
        if b.shape == (1, a.shape[1]):
            return _make(
                a.value - b.value,
                (a, b),
                lambda g: (g, -g.sum(axis=0, keepdims=True)),
            )
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value - float(b), (a,), lambda g: (g,))


def mul(a: Node, b) -> Node:
    """Elementwise product with a same-shape node, or scaling by a number."""
    if isinstance(b, Node):
        _require_same_shape("mul", a, b)
        return _make(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))
    return scale(a, b)


def scale(a: Node, s: float) -> Node:
    s = float(s)
    return _make(a.value * s, (a,), lambda g: (g * s,))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _make(out, (a,), lambda g: (g / a.value,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def transpose(a: Node) -> Node:
    return _make(a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Node, rows: int, cols: int) -> Node:
    if rows * cols != a.value.size:
        raise ValueError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    return _make(
        a.value.reshape(rows, cols),
        (a,),
        lambda g: (g.reshape(a.shape),),
    )


def row_sum(a: Node) -> Node:
    """Sum along each row; returns a K-by-1 column."""
    return _make(
        a.value.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape),),
    )


def row_mean(a: Node) -> Node:
    cols = a.shape[1]
    if cols == 0:
        raise ValueError("row_mean: empty rows")
    return scale(row_sum(a), 1.0 / cols)


def sum_all(a: Node) -> Node:
    """Sum of all entries as a 1-by-1 node."""
    return _make(
        a.value.sum().reshape(1, 1),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape),),
    )


def mean_all(a: Node) -> Node:
    if a.value.size == 0:
        raise ValueError("mean_all: empty matrix")
    return scale(sum_all(a), 1.0 / a.value.size)


def _require_square(op: str, a: Node) -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{op}: needs a square matrix, got {a.shape}")


def diag_part(a: Node) -> Node:
    """Diagonal of a square matrix as a K-by-1 column."""
    _require_square("diag_part", a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.fill_diagonal(out, g.ravel())
        return (out,)

    return _make(np.diagonal(a.value).reshape(-1, 1).copy(), (a,), vjp)


def offdiag(a: Node) -> Node:
    """Off-diagonal entries of a K-by-K matrix as K rows of length K-1.

    Row i keeps its original column order with entry (i, i) removed.
    """
    _require_square("offdiag", a)
    k = a.shape[0]
    if k < 2:
        raise ValueError(f"offdiag: needs at least a 2x2 matrix, got {a.shape}")
    mask = ~np.eye(k, dtype=bool)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[mask] = g.ravel()
        return (out,)

    return _make(a.value[mask].reshape(k, k - 1), (a,), vjp)


def l2_normalize_rows(a: Node) -> Node:
    """Rescale each row to unit Euclidean norm."""
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise ValueError("l2_normalize_rows: cannot normalize a zero row")
    out = a.value / norms

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * inner) / norms,)

    return _make(out, (a,), vjp)


def logsumexp_row(a: Node) -> Node:
    """Per-row log-sum-exp, max-shifted so |entries| up to 1e4 cannot overflow."""
    if a.shape[1] == 0:
        raise ValueError("logsumexp_row: empty row")
    m = a.value.max(axis=1, keepdims=True)
    with np.errstate(over="ignore"):
        out = m + np.log(np.exp(a.value - m).sum(axis=1, keepdims=True))

    def vjp(g):
        return (np.exp(a.value - out) * g,)

    return _make(out, (a,), vjp)


def detach(a: Node) -> Node:
    """Capture the current value as a constant: identical forward value,
    zero gradient flow into `a`."""
    return Node(a.value)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen = {id(root)}
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, idx = stack[-1]
        if idx < len(node._parents):
            stack[-1] = (node, idx + 1)
            p = node._parents[idx]
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, 0))
        else:
            order.append(node)
            stack.pop()
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into `.grad` for every reachable node.

    The root must be 1x1. Gradients are reset at the start of each call,
    so repeated backward passes do not accumulate across calls.
    """
    if root.shape != (1, 1):
        raise ValueError(f"backward: root must be a 1x1 scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad += np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node._parents, grads):
            if p.requires_grad:
                p.grad += g


def finite_difference_grad(
    f: Callable[[Sequence[np.ndarray]], float],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient estimate of a scalar function.

    `f` receives the full parameter list and returns a float; every
    coordinate of every parameter is perturbed by +-h in turn.
    """
    if h <= 0:
        raise ValueError(f"finite_difference_grad: h must be positive, got {h}")
    work = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for p in work:
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            f_plus = f(work)
            flat_p[i] = orig - h
            f_minus = f(work)
            flat_p[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads
