"""Dense float64 tensors with reverse-mode differentiation.

The op set is the smallest one that closes over both encoders and every
training loss: matmul, broadcasted elementwise arithmetic, relu/tanh,
log/exp, row softmax and log-softmax, sum/mean reductions, row L2
normalization, pairwise squared distances, row gathering, scalar scaling
and transpose.  A graph is built fresh for every evaluation and traversed
exactly once by backward(); tensors reachable from a graph are never
mutated in place.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, NonScalarLoss, RepeatedBackward, ShapeMismatch

__all__ = [
    "Tensor",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "tanh",
    "log",
    "exp",
    "row_softmax",
    "row_log_softmax",
    "sum_",
    "mean",
    "l2_normalize_rows",
    "pairwise_sq_dists",
    "gather_rows",
    "scale",
    "transpose",
    "backward",
    "reset_graph",
    "finite_difference_check",
]

# Rows with L2 norm below this are passed through l2_normalize_rows
# unchanged (and reported via Tensor.guarded_rows).
NORM_GUARD = 1e-12


class Tensor:
    """One node of the computation graph.

    Holds the cached forward value (a float64 ndarray), the gradient
    accumulator filled in by backward(), and references to the parent
    nodes this value was computed from.
    """

    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "op",
        "guarded_rows",
        "_parents",
        "_backward_fn",
        "_backward_done",
    )

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.guarded_rows: tuple[int, ...] = ()
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Operator sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(op, data, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, (a.shape, b.shape)) from None


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", (a.shape, b.shape))

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _node("matmul", a.data @ b.data, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node("mul", a.data * b.data, (a, b), bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _node("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _node("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _node("log", out, (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _node("exp", e, (x,), lambda g: (g * e,))


def _require_2d(op: str, x: Tensor) -> None:
    if x.data.ndim != 2:
        raise ShapeMismatch(op, (x.shape,))


def row_softmax(x) -> Tensor:
    x = _as_tensor(x)
    _require_2d("row_softmax", x)
    # Max subtraction keeps exp() in range for temperature-scaled logits.
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node("row_softmax", s, (x,), bwd)


def row_log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    _require_2d("row_log_softmax", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _node("row_log_softmax", out, (x,), bwd)


def sum_(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        return _node("sum", x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    if x.data.ndim != 2 or axis not in (0, 1):
        raise ShapeMismatch("sum", (x.shape,))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node("sum", x.data.sum(axis=axis), (x,), bwd)


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
        return _node("mean", x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    if x.data.ndim != 2 or axis not in (0, 1):
        raise ShapeMismatch("mean", (x.shape,))
    n = x.shape[axis]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return _node("mean", x.data.mean(axis=axis), (x,), bwd)


def l2_normalize_rows(x) -> Tensor:
    x = _as_tensor(x)
    _require_2d("l2_normalize_rows", x)
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    guarded = norms[:, 0] < NORM_GUARD
    safe = np.where(guarded[:, None], 1.0, norms)
    y = x.data / safe

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        gx = (g - y * dot) / safe
        if guarded.any():
            gx = gx.copy()
            gx[guarded] = g[guarded]
        return (gx,)

    out = _node("l2_normalize_rows", y, (x,), bwd)
    out.guarded_rows = tuple(int(i) for i in np.flatnonzero(guarded))
    return out


def pairwise_sq_dists(x, y) -> Tensor:
    """Squared Euclidean distances between the rows of x [m,d] and y [n,d]."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeMismatch("pairwise_sq_dists", (x.shape, y.shape))
    xs = (x.data * x.data).sum(axis=1, keepdims=True)
    ys = (y.data * y.data).sum(axis=1, keepdims=True)
    raw = xs + ys.T - 2.0 * (x.data @ y.data.T)
    # Clamp the tiny negatives the expansion can produce; gradient is cut
    # where the clamp engages (the true distance there is 0).
    mask = raw > 0
    out = np.where(mask, raw, 0.0)

    def bwd(g):
        gm = g * mask
        gx = 2.0 * (gm.sum(axis=1, keepdims=True) * x.data - gm @ y.data)
        gy = 2.0 * (gm.sum(axis=0)[:, None] * y.data - gm.T @ x.data)
        return gx, gy

    return _node("pairwise_sq_dists", out, (x, y), bwd)


def gather_rows(x, indices) -> Tensor:
    x = _as_tensor(x)
    _require_2d("gather_rows", x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows", (x.shape, idx.shape))
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node("gather_rows", x.data[idx], (x,), bwd)


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return _node("scale", x.data * s, (x,), lambda g: (g * s,))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    _require_2d("transpose", x)
    return _node("transpose", x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable node.

    Each node is visited exactly once, in reverse topological order.
    Calling backward twice on the same graph without reset_graph() is an
    error: accumulators would silently double.
    """
    if loss.data.shape != ():
        raise NonScalarLoss(f"backward requires a scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise RepeatedBackward("backward already ran on this graph; call reset_graph first")
    loss._backward_done = True
    order = _toposort(loss)
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.grad is None or node._backward_fn is None:
            continue
        for parent, g in zip(node._parents, node._backward_fn(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise ShapeMismatch(f"backward[{node.op}]", (g.shape, parent.shape))
            parent.grad = g if parent.grad is None else parent.grad + g


def reset_graph(root: Tensor) -> None:
    """Clear gradients and the backward flag for every node under root."""
    for node in _toposort(root):
        node.grad = None
        node._backward_done = False


def finite_difference_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic function building a scalar graph from a
    list of leaf tensors.  The relative error for each coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    values = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(v, requires_grad=True) for v in values]
    out = f(leaves)
    if out.data.shape != ():
        raise NonScalarLoss("finite_difference_check requires a scalar-valued f")
    backward(out)
    analytic = [np.zeros_like(v) if l.grad is None else l.grad for v, l in zip(values, leaves)]

    def evaluate(vals: list[np.ndarray]) -> float:
        return float(f([Tensor(v) for v in vals]).data)

    worst = 0.0
    for k, base in enumerate(values):
        flat = base.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate(values)
            flat[i] = orig - eps
            lo = evaluate(values)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[k].ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
