"""Dense n-d arrays with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array (f32 or f64) and doubles as a node
in an implicit computation graph: each op records its parents and a closure
that maps the output gradient to parent gradients.  ``backward`` walks the
graph once in reverse topological order and returns the gradient of a
scalar loss with respect to every leaf that requires gradients.

Every op validates that its output is finite and raises ``NumericalError``
otherwise: training failures surface at the op that produced them instead
of propagating NaNs.
"""

from __future__ import annotations

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes or dimensions."""


class NumericalError(ArithmeticError):
    """An op produced a non-finite value (NaN or Inf)."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (e.g. repeated backward)."""


def _as_array(value, dtype=None):
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float32 if dtype is None else dtype)
    return np.ascontiguousarray(arr)


def check_finite(arr, op_name):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op_name} produced non-finite values")


class Tensor:
    """A dense array plus an optional handle into the op graph.

    ``requires_grad=True`` marks a leaf parameter; tensors produced by ops
    inherit the flag from their parents.  ``grad`` is populated on leaves
    by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "_backward_done")

    def __init__(self, data, dtype=None, requires_grad=False):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    def detach(self):
        """A leaf view of the same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return divide(self, other)
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(value, dtype=None):
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def make_op(data, parents, vjp, op_name):
    """Create a graph node.

    ``vjp`` maps the output gradient array to a tuple with one gradient
    array (or None) per parent.  Extension point for ops defined outside
    this package (the Lanczos shift uses it).
    """
    check_finite(data, op_name)
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op_name
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce_pair(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(data, (a, b), vjp, "add")


def mul(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(data, (a, b), vjp, "mul")


def divide(a, b):
    a, b = _coerce_pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    check_finite(data, "divide")

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(data, (a, b), vjp, "divide")


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)
    check_finite(data, "sqrt")

    def vjp(g):
        return (g * (0.5 / np.maximum(data, np.finfo(data.dtype).tiny)),)

    return make_op(data, (x,), vjp, "sqrt")


# -- reductions and shape ops ------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return make_op(np.asarray(data), (x,), vjp, "sum")


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return make_op(data, (x,), vjp, "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_op(data, tensors, vjp, "concat")


def getitem(x, key):
    x = as_tensor(x)
    data = x.data[key]

    def vjp(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[key] += g
        return (full,)

    return make_op(np.ascontiguousarray(data), (x,), vjp, "getitem")


# -- backward ----------------------------------------------------------------


def _topo_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Reverse-mode gradients of a scalar loss.

    Returns a map from each leaf tensor with ``requires_grad`` to its
    gradient array, and mirrors it into ``leaf.grad``.  A graph may be
    differentiated once; repeated calls raise ``GraphError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward was already run on this graph")
    loss._backward_done = True

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaf_grads = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g
                leaf_grads[node] = g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"vjp of {node._op} returned shape {pg.shape} for parent {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads
