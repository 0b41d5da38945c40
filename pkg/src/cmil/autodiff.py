"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every operation returns a new ``Tensor``
holding its value, its parent nodes, and a closure that scatters the
upstream gradient onto the parents. ``backward()`` visits the tape once
in reverse topological order. Broadcasting is deliberately narrow
(scalar-with-tensor and equal shapes, plus dedicated row helpers), so
shape bugs fail at op construction rather than producing silent garbage.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray


class Tensor:
    """Immutable float64 array plus tape bookkeeping.

    ``data`` must not be mutated after construction; the optimizer swaps in
    fresh arrays instead. ``grad`` is populated by ``backward`` and has the
    same shape as ``data``.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # -- elementwise dunders ------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    # -- backward pass ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to(g: Array, shape: tuple) -> Array:
    # broadcasting is scalar-vs-tensor only, so the reduction is total or none
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


# -- elementwise ops ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")

    def bwd(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return Tensor(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")

    def bwd(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    return Tensor(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")

    def bwd(g):
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "div")

    def bwd(g):
        _accumulate(a, _reduce_to(g / b.data, a.shape))
        _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g)

    return Tensor(-a.data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0.0

    def bwd(g):
        _accumulate(a, g * mask)

    return Tensor(np.where(mask, a.data, 0.0), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - y * y))

    return Tensor(y, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_value(a.data)

    def bwd(g):
        _accumulate(a, g * y * (1.0 - y))

    return Tensor(y, (a,), bwd)


def sigmoid_value(x: Array | float) -> Array:
    """Numerically stable logistic function on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * y)

    return Tensor(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g / a.data)

    return Tensor(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g / (2.0 * y))

    return Tensor(y, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    # gradient passes through wherever the value was not clipped
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accumulate(a, g * inside)

    return Tensor(np.clip(a.data, lo, hi), (a,), bwd)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    an, bn = a.data.ndim, b.data.ndim
    if an == 0 or bn == 0 or an > 2 or bn > 2:
        raise ShapeError(f"matmul supports 1-D and 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def bwd(g):
        if an == 2 and bn == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif an == 1 and bn == 2:
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))
        elif an == 2 and bn == 1:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        else:  # 1-D dot product, g is scalar
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

    return Tensor(y, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose requires a 2-D tensor, got shape {a.shape}")

    def bwd(g):
        _accumulate(a, g.T)

    return Tensor(a.data.T, (a,), bwd)


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-c vector to every row of an r-by-c matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {m.shape} and {v.shape}")

    def bwd(g):
        _accumulate(m, g)
        _accumulate(v, g.sum(axis=0))

    return Tensor(m.data + v.data[None, :], (m, v), bwd)


def scale_rows(m: Tensor, v: Tensor) -> Tensor:
    """Scale row r of an r-by-c matrix by v[r]."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {m.shape} and {v.shape}")

    def bwd(g):
        _accumulate(m, g * v.data[:, None])
        _accumulate(v, (g * m.data).sum(axis=1))

    return Tensor(m.data * v.data[:, None], (m, v), bwd)


def gather(a: Tensor, indices) -> Tensor:
    """Select entries of a 1-D tensor at the given integer indices."""
    if a.data.ndim != 1:
        raise ShapeError(f"gather requires a 1-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather index out of range for length {a.shape[0]}")

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return Tensor(a.data[idx], (a,), bwd)


# -- softmax and reductions ---------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.data.size == 0:
        raise ShapeError(f"softmax requires a nonempty 1-D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    y = e / e.sum()

    def bwd(g):
        _accumulate(a, y * (g - np.dot(g, y)))

    return Tensor(y, (a,), bwd)


def reduce_sum(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("sum of an empty tensor")

    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), (a,), bwd)


def reduce_mean(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.data.size

    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return Tensor(a.data.mean(), (a,), bwd)


def sq_l2(a: Tensor) -> Tensor:
    """Sum of squared entries."""
    if a.data.size == 0:
        raise ShapeError("sq_l2 of an empty tensor")

    def bwd(g):
        _accumulate(a, 2.0 * float(g) * a.data)

    return Tensor(np.sum(a.data * a.data), (a,), bwd)


def percentile(a: Tensor, q: float) -> Tensor:
    """Linear-interpolation percentile of a 1-D tensor at level q in [0, 1].

    The value interpolates between the two order statistics around rank
    q*(n-1); the gradient scatters the interpolation weights back to the
    positions holding those statistics.
    """
    if a.data.ndim != 1 or a.data.size < 2:
        raise ShapeError(f"percentile requires a 1-D tensor with at least 2 entries, got {a.shape}")
    if not 0.0 <= q <= 1.0:
        raise ShapeError(f"percentile level must be in [0, 1], got {q}")
    order = np.argsort(a.data, kind="stable")
    n = a.data.size
    rank = q * (n - 1)
    lo = int(math.floor(rank))
    hi = int(math.ceil(rank))
    frac = rank - lo
    value = (1.0 - frac) * a.data[order[lo]] + frac * a.data[order[hi]]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[order[lo]] += (1.0 - frac) * float(g)
        if hi != lo:
            a.grad[order[hi]] += frac * float(g)

    return Tensor(value, (a,), bwd)


# -- utilities ----------------------------------------------------------------


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")


def relative_error(analytic: Array, numeric: Array) -> float:
    """Max over coordinates of |a - n| / (|a| + |n| + 1e-12)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12))) if a.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    ``f`` must map a single tensor to a scalar tensor and be smooth at
    ``point`` (the caller keeps clear of activation kinks).
    """
    return grad_check_many(lambda ts: f(ts[0]), [point], eps=eps)


def grad_check_many(
    f: Callable[[Sequence[Tensor]], Tensor],
    points: Sequence[Tensor],
    eps: float = 1e-5,
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """grad_check over several leaf tensors at once.

    ``coords`` optionally restricts the finite-difference sweep to flat
    indices per tensor position (useful when the full sweep is too slow);
    the analytic gradient is always the full backward pass.
    """
    out = f(points)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    zero_grads(points)
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]

    worst = 0.0
    for pi, p in enumerate(points):
        flat = p.data.reshape(-1)
        idxs = coords.get(pi, np.arange(flat.size)) if coords is not None else np.arange(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(points).data)
            flat[i] = orig - eps
            f_minus = float(f(points).data)
            flat[i] = orig
            cd = (f_plus - f_minus) / (2.0 * eps)
            an = analytic[pi].reshape(-1)[i]
            worst = max(worst, float(abs(an - cd) / (abs(an) + abs(cd) + 1e-12)))
    return worst
