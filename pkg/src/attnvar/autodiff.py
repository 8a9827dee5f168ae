"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the primitives needed by an LSTM pointer-generator and the attention
variance losses are provided. Every op records its parents and a closure that
pushes the upstream gradient back to them; :meth:`Tensor.backward` walks the
graph in reverse topological order.

Gradients on leaves accumulate across calls; callers reset them with
:meth:`Tensor.zero_grad` between optimisation steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the computation graph.

    ``data`` holds the value, ``grad`` the accumulated adjoint (``None`` until
    a backward pass reaches the node).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name", "_own", "_seq")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name
        self._own = False
        self._seq = _next_seq()

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def zero_grad(self):
        self.grad = None
        self._own = False

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray):
        # an incoming array may be shared with other nodes; only buffers this
        # node allocated itself (``_own``) are updated in place
        if self.grad is None:
            self.grad = g
            self._own = False
        elif self._own:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._own = True

    def _grad_buffer(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            self._own = True
        elif not self._own:
            self.grad = self.grad.copy()
            self._own = True
        return self.grad

    def backward(self, grad: np.ndarray | None = None):
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward: root must be a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        # intermediate adjoints are local to this pass; leaves accumulate
        self._accum(np.asarray(grad, dtype=np.float64))
        for node in order:
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            node.grad = None
            node._own = False

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


_counter = 0


def _next_seq() -> int:
    global _counter
    _counter += 1
    return _counter


def _topological_order(root: Tensor) -> list[Tensor]:
    """Reachable nodes, consumers before producers.

    Parents are always created before their children, so descending creation
    order is a valid reverse topological order.
    """
    seen = {id(root): root}
    stack = [root]
    while stack:
        for p in stack.pop()._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n._seq, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out._own = False
    out._seq = _next_seq()
    live = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = live
    if live:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("add", np.add, a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("sub", np.subtract, a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("mul", np.multiply, a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("div", np.divide, a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", backward)


# -- elementwise unary -------------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: a._accum(-g))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), "square", lambda g: a._accum(2.0 * a.data * g))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _make(out, (a,), "reciprocal", lambda g: a._accum(-g * out * out))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: a._accum(g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: a._accum(g / a.data))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: a._accum(g * (1.0 - out * out)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), "sigmoid", lambda g: a._accum(g * out * (1.0 - out)))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), "clamp_min", lambda g: a._accum(g * keep))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select: ``a`` where ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        out = np.where(cond, a.data, b.data)
    except ValueError:
        raise ShapeError("where", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(out, (a, b), "where", backward)


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out2 = a2 @ b2
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim > 1 else out[..., 0]

    def backward(g):
        g2 = g.reshape(out2.shape)
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            a._accum(_unbroadcast(ga, a2.shape).reshape(a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            b._accum(_unbroadcast(gb, b2.shape).reshape(b.shape))

    return _make(out, (a, b), "matmul", backward)


# -- normalisation -----------------------------------------------------------
def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction; ``mask`` False entries get exactly zero."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accum(out * (g - dot))

    return _make(out, (a,), "softmax", backward)


# -- reductions --------------------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(out), (a,), "sum", backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis: int = -1) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        a._accum(ga)

    return _make(out, (a,), "max", backward)


def median(a, mask: np.ndarray | None = None) -> Tensor:
    """Median over the last axis, optionally restricted to ``mask`` entries.

    Even counts average the two middle order statistics. Subgradient: the
    middle element (odd) or half to each of the two middle elements (even);
    ties resolved toward the lowest index.
    """
    a = as_tensor(a)
    x = a.data
    if x.shape[-1] == 0:
        raise ValueError("median of an empty sequence")
    if mask is None:
        keyed = x
        count = np.full(x.shape[:-1], x.shape[-1])
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        count = mask.sum(axis=-1)
        if np.any(count == 0):
            raise ValueError("median of an empty sequence")
        keyed = np.where(mask, x, np.inf)
    order = np.argsort(keyed, axis=-1, kind="stable")
    lo = np.take_along_axis(order, ((count - 1) // 2)[..., None], axis=-1)
    hi = np.take_along_axis(order, (count // 2)[..., None], axis=-1)
    out = 0.5 * (np.take_along_axis(x, lo, -1) + np.take_along_axis(x, hi, -1))[..., 0]

    def backward(g):
        ga = np.zeros_like(x)
        half = 0.5 * g[..., None]
        # lo == hi for odd counts: two scatters of a half each
        lo_part = np.zeros_like(x)
        np.put_along_axis(lo_part, lo, half, axis=-1)
        hi_part = np.zeros_like(x)
        np.put_along_axis(hi_part, hi, half, axis=-1)
        ga += lo_part + hi_part
        a._accum(ga)

    return _make(out, (a,), "median", backward)


# -- shape manipulation ------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), "reshape", lambda g: a._accum(g.reshape(a.shape)))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return _make(out, (a,), "swapaxes", lambda g: a._accum(np.swapaxes(g, ax1, ax2)))


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    out = a.data[index]
    basic = all(
        isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        buf = a._grad_buffer()
        if basic:
            buf[index] += g
        else:
            np.add.at(buf, index, g)

    return _make(np.array(out, copy=True), (a,), "getitem", backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(out, ts, "concat", backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(out, ts, "stack", backward)


# -- finite-difference checking ---------------------------------------------
def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-3,
    zero_tol: float = 1e-8,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` is re-evaluated after perturbing ``params`` in place, so it must
    close over them. Coordinates where both estimates are below ``zero_tol``
    are compared by absolute difference instead.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                diff = abs(gflat[i] - numeric)
                scale = max(abs(gflat[i]), abs(numeric))
                err = diff if scale < zero_tol else diff / max(scale, 1e-12)
                worst = max(worst, err)
    return worst
