"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array and
doubles as a node on the gradient tape.  Every differentiable operation
returns a new tensor holding references to its inputs plus a closure that
maps the upstream gradient to per-input gradients.  :func:`backward` walks
the resulting DAG once, in reverse topological order.

Two guarantees the rest of the package leans on:

* any op whose inputs are all constants folds into a constant (no parents,
  no backward hook), so constant subgraphs never appear on the tape;
* :func:`stop_gradient` returns a plain constant copy, so gradient flow
  through it is exactly zero by construction.

All randomness comes from numpy's PCG64 generator, so a fixed seed
reproduces bit-identical tensors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "op_node",
    "zeros",
    "full",
    "seeded_normal",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "sum",
    "index",
    "row",
    "stack_rows",
    "softmax",
    "silu",
    "stop_gradient",
    "backward",
    "zero_grads",
    "finite_diff_grad",
    "max_rel_err",
]


class ShapeError(ValueError):
    """Operands disagree on shape, or an illegal shape was requested."""


class NonFiniteError(FloatingPointError):
    """An operation produced (or was handed) NaN or infinity."""


class TapeError(RuntimeError):
    """Backward was misused: non-scalar loss, re-entry, or no tape."""


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A dense float64 array that is also a node on the gradient tape.

    ``op_kind`` names the producing operation ("leaf" for user-created
    tensors); ``grad`` is filled by :func:`backward` and holds an array of
    the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op_kind",
                 "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op_kind = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.data.shape}, op={self.op_kind!r}, "
                f"requires_grad={self.requires_grad})")

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def op_node(data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], tuple], op_kind: str) -> Tensor:
    """Build the tensor produced by ``op_kind``.

    ``backward_fn(upstream)`` must return one gradient array per parent
    (``None`` for a parent that receives nothing).  If no parent requires
    gradients the result is folded into a constant.

    This is the extension hook: modules outside the engine (rotary
    rotation, the training loss) define their own ops through it.
    """
    arr = _as_f64(data)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"op '{op_kind}' produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.op_kind = op_kind
    out._backward_done = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------

def _validate_shape(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dimensions must be >= 1, got {dims}")
    return dims


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_validate_shape(shape)), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_validate_shape(shape), float(value)), requires_grad=requires_grad)


def seeded_normal(shape, seed, std: float, requires_grad: bool = False) -> Tensor:
    """Normal(0, std) draw from a PCG64 stream keyed by ``seed``.

    ``seed`` may be an int or a sequence of ints (a derived stream key);
    identical seeds give bit-identical tensors.
    """
    dims = _validate_shape(shape)
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, float(std), size=dims), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    # equal shapes, or one side is a scalar (size-1) broadcast
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # fold a broadcast gradient back onto a size-1 operand
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")

    def backward_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return op_node(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")

    def backward_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return op_node(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise product; one operand may be a scalar (size-1) tensor."""
    _check_binary(a, b, "mul")

    def backward_fn(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return op_node(a.data * b.data, (a, b), backward_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not a tape node)."""
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return op_node(a.data * c, (a,), backward_fn, "scale")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (m,k)@(k,) and (k,)@(k,n)."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

        def backward_fn(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

        def backward_fn(g):
            return np.outer(g, bd), ad.T @ g

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

        def backward_fn(g):
            return bd @ g, np.outer(ad, g)

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")

    return op_node(ad @ bd, (a, b), backward_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def backward_fn(g):
        return (g.T,)

    return op_node(a.data.T, (a,), backward_fn, "transpose")


# ---------------------------------------------------------------------------
# reductions and indexing
# ---------------------------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries, as a scalar tensor."""

    def backward_fn(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return op_node(np.sum(a.data), (a,), backward_fn, "sum")


def index(a: Tensor, i: int) -> Tensor:
    """Scalar entry ``a[i]`` of a vector, kept on the tape."""
    if a.data.ndim != 1:
        raise ShapeError(f"index expects a vector, got shape {a.data.shape}")
    i = int(i)
    if not 0 <= i < a.data.shape[0]:
        raise ShapeError(f"index {i} out of range for length {a.data.shape[0]}")

    def backward_fn(g):
        out = np.zeros_like(a.data)
        out[i] = g
        return (out,)

    return op_node(a.data[i], (a,), backward_fn, "index")


def row(a: Tensor, i: int) -> Tensor:
    """Row ``a[i]`` of a matrix, kept on the tape."""
    if a.data.ndim != 2:
        raise ShapeError(f"row expects a matrix, got shape {a.data.shape}")
    i = int(i)
    if not 0 <= i < a.data.shape[0]:
        raise ShapeError(f"row {i} out of range for {a.data.shape[0]} rows")

    def backward_fn(g):
        out = np.zeros_like(a.data)
        out[i, :] = g
        return (out,)

    return op_node(a.data[i].copy(), (a,), backward_fn, "row")


def stack_rows(rows: Iterable[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix, one tape node."""
    rows = tuple(rows)
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    for r in rows:
        if r.data.shape != rows[0].data.shape or r.data.ndim != 1:
            raise ShapeError("stack_rows needs equal-length vectors")

    def backward_fn(g):
        return tuple(g[i].copy() for i in range(len(rows)))

    return op_node(np.stack([r.data for r in rows]), rows, backward_fn, "stack_rows")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max-subtracted).

    Outputs are strictly positive and each row sums to 1.  Backward applies
    the softmax Jacobian: ``y * (g - sum(g * y))`` per row.
    """
    z = x.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return op_node(y, (x,), backward_fn, "softmax")


def silu(x: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit ``u * sigmoid(u)``, pointwise."""
    with np.errstate(over="ignore"):  # exp overflow saturates sigmoid to 0 exactly
        s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def backward_fn(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return op_node(y, (x,), backward_fn, "silu")


def stop_gradient(x: Tensor) -> Tensor:
    """Copy of ``x`` with zero gradient flow to it (a fresh constant)."""
    out = Tensor(x.data.copy())
    out.op_kind = "stop_gradient"
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Fills ``.grad`` on every tensor reachable through gradient-requiring
    links, accumulating over fan-out.  Each tape node is visited exactly
    once.  Re-running on the same loss without resetting raises.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise TapeError("backward already ran for this loss; zero grads and rebuild the tape")
    if not loss.requires_grad:
        raise TapeError("loss is not connected to any tensor that requires gradients")
    loss._backward_done = True

    # iterative postorder: parents land before their consumers
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        if v.data.size != 1:
            raise ShapeError("finite_diff_grad needs a scalar-valued function")
        return float(v.data.reshape(()))
    arr = np.asarray(v, dtype=np.float64)
    if arr.size != 1:
        raise ShapeError("finite_diff_grad needs a scalar-valued function")
    return float(arr.reshape(()))


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x``: (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps).

    Completely independent of the tape; ``f`` is evaluated on plain
    perturbed copies, two per coordinate.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = x.data
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        grad[idx] = (_scalar_value(f(Tensor(plus))) - _scalar_value(f(Tensor(minus)))) / (2.0 * eps)
    return grad


def max_rel_err(a, b) -> float:
    """max |a-b| scaled by max(1, |b|_inf); below unit scale this is absolute error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(b)))) if b.size else 1.0
    return float(np.max(np.abs(a - b)) / denom)
