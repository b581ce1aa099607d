"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Calling :func:`backward` on a scalar orders the recorded nodes into a
:class:`Tape` and replays it once in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import GradCheckError, GraphError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_node_ids = itertools.count()
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "_consumed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    # method forms of the free functions
    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce(self, axis, "sum")

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce(self, axis, "mean")

    def max(self, axis: Optional[int] = None) -> "Tensor":
        return reduce(self, axis, "max")

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def relu(self) -> "Tensor":
        return activation(self, "relu")

    def sigmoid(self) -> "Tensor":
        return activation(self, "sigmoid")

    def tanh(self) -> "Tensor":
        return activation(self, "tanh")

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def activation(x: ArrayLike, kind: str) -> Tensor:
    """Elementwise ``relu``, ``sigmoid`` or ``tanh``.

    The ReLU derivative at exactly zero is taken to be 0.
    """
    x = as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return _node(s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "tanh":
        t = np.tanh(x.data)
        return _node(t, (x,), lambda g: (g * (1.0 - t * t),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: ArrayLike) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: ArrayLike) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: ArrayLike) -> Tensor:
    return activation(x, "tanh")


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(out, (a, b), grad_fn)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), grad_fn)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _node(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def reduce(x: ArrayLike, axis: Optional[int], kind: str) -> Tensor:
    """Sum, mean or max along ``axis`` (``None`` reduces everything).

    For ``max`` the gradient flows only to the first maximal element.
    """
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    if kind == "sum":
        out = x.data.sum(axis=axis)
        return _node(out, (x,), lambda g: (np.broadcast_to(_expand(g, axis, x.ndim), x.shape).copy(),))
    if kind == "mean":
        count = x.size if axis is None else x.shape[axis]
        out = x.data.mean(axis=axis)
        return _node(out, (x,),
                     lambda g: (np.broadcast_to(_expand(g, axis, x.ndim) / count, x.shape).copy(),))
    if kind == "max":
        if axis is None:
            flat = int(np.argmax(x.data))
            out = x.data.reshape(-1)[flat]

            def grad_all(g):
                gx = np.zeros(x.size)
                gx[flat] = g
                return (gx.reshape(x.shape),)

            return _node(out, (x,), grad_all)
        idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
        out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

        def grad_axis(g):
            gx = np.zeros(x.shape)
            np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return _node(out, (x,), grad_axis)
    raise ValueError(f"unknown reduction {kind!r}")


def _expand(g: np.ndarray, axis: Optional[int], ndim: int) -> np.ndarray:
    if axis is None:
        return np.reshape(g, (1,) * ndim)
    return np.expand_dims(g, axis)


def pool_windows(n: int, out_len: int) -> list:
    """Window bounds ``[floor(i*n/out_len), floor((i+1)*n/out_len))`` per output slot."""
    if not 1 <= out_len <= n:
        raise ShapeError(f"adaptive pool output length {out_len} must lie in [1, {n}]")
    return [(i * n // out_len, (i + 1) * n // out_len) for i in range(out_len)]


def adaptive_avg_pool(x: ArrayLike, out_len: int) -> Tensor:
    """Average-pool the last axis of ``x`` down to ``out_len`` windows."""
    x = as_tensor(x)
    n = x.shape[-1]
    pool = np.zeros((n, out_len))
    for i, (lo, hi) in enumerate(pool_windows(n, out_len)):
        pool[lo:hi, i] = 1.0 / (hi - lo)
    return _node(x.data @ pool, (x,), lambda g: (g @ pool.T,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: ArrayLike, shape: tuple) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Optional[tuple] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: ArrayLike, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic(index)

    def grad_fn(g):
        gx = np.zeros(x.shape)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _node(x.data[index], (x,), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = _check_axis(axis, out.ndim)
    return _node(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    axis = _check_axis(axis, out.ndim)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Recorded operations reachable from a loss, in topological order.

    Node ids grow monotonically with creation time and every operation is
    created after its inputs, so sorting ancestors by id is a valid
    topological order and is deterministic.
    """

    def __init__(self, loss: Tensor):
        seen = {}
        stack_ = [loss]
        while stack_:
            node = stack_.pop()
            if node.node_id in seen:
                continue
            if node._consumed:
                raise GraphError("backward already ran through this graph; run a fresh forward pass")
            seen[node.node_id] = node
            stack_.extend(node._parents)
        self.nodes = sorted(seen.values(), key=lambda t: t.node_id)

    def __len__(self) -> int:
        return sum(1 for n in self.nodes if n._backward is not None)

    def replay(self, seed: np.ndarray) -> None:
        grads = {self.nodes[-1].node_id: seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every differentiable ancestor of scalar ``loss``.

    Leaf gradients accumulate across calls until reset with :func:`zero_grad`;
    a graph can be traversed only once.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this loss; run a fresh forward pass")
    if loss._backward is None:
        raise GraphError("loss has no recorded operations (empty tape)")
    Tape(loss).replay(np.ones(loss.shape))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` rebuilds the scalar from ``params`` on every call. The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    zero_grad(params)
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for k, (p, a) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = f().item()
                flat[i] = orig - eps
                f_minus = f().item()
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise GradCheckError(f"non-finite value perturbing parameter {k} coordinate {i}")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                exact = a.reshape(-1)[i]
                err = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
                worst = max(worst, err)
    zero_grad(params)
    return worst
