"""Dense float64 tensors on a reverse-mode differentiation tape.

A ``Node`` wraps an immutable float64 array and remembers how it was
produced; ``backward`` walks the tape from a scalar root and accumulates
adjoints into ``Node.grad``. The tape is rebuilt on every training step,
so nothing here persists between steps.

Broadcasting is deliberately narrow: two operands combine only when their
shapes are identical, one of them is a scalar, or one shape is a trailing
suffix of the other (e.g. bias ``(h,)`` against activations ``(n, h)``).
"""

import numpy as np

from . import special


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform under the supported broadcasting."""

    def __init__(self, op, lhs_shape, rhs_shape):
        self.lhs_shape = tuple(lhs_shape)
        self.rhs_shape = tuple(rhs_shape)
        super().__init__(f"{op}: shapes {self.lhs_shape} and {self.rhs_shape} do not conform")


DomainError = special.DomainError


def tensor(data):
    """Coerce data to a contiguous float64 array (the value type of a Node)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Node:
    """One value in the differentiation graph.

    ``value`` is a float64 array, ``grad`` is lazily materialized with the
    same shape, and ``_parents``/``_vjp`` record the producing operation.
    Leaf nodes (parameters, constants) have no parents.
    """

    __slots__ = ("value", "grad", "name", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = tensor(value)
        self.grad = None
        self.name = name
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.size != 1:
            raise ValueError(f"item() requires a single-element node, got shape {self.value.shape}")
        return float(self.value.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Node(shape={self.value.shape}{tag})"

    # operator sugar; every overload routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    """Leaf node intended to be updated by an optimizer."""
    return Node(data, name=name)


def constant(data):
    """Leaf node that never needs a gradient (still receives one if reached)."""
    return Node(data)


def as_node(x):
    return x if isinstance(x, Node) else Node(tensor(x))


def _check_conform(op, a_shape, b_shape):
    if a_shape == b_shape:
        return
    la, lb = len(a_shape), len(b_shape)
    if min(np.prod(a_shape, dtype=int) if la else 1, np.prod(b_shape, dtype=int) if lb else 1) == 1:
        return
    short, long_ = (a_shape, b_shape) if la < lb else (b_shape, a_shape)
    if len(short) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeMismatchError(op, a_shape, b_shape)


def _unbroadcast(grad, shape):
    """Reduce a gradient back to the shape of the operand it belongs to."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(op_name, a, b, forward, vjp_a, vjp_b):
    a, b = as_node(a), as_node(b)
    _check_conform(op_name, a.value.shape, b.value.shape)
    out_value = forward(a.value, b.value)

    def vjp(g):
        return (_unbroadcast(vjp_a(g, a.value, b.value, out_value), a.value.shape),
                _unbroadcast(vjp_b(g, a.value, b.value, out_value), b.value.shape))

    return Node(out_value, parents=(a, b), vjp=vjp)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def subtract(a, b):
    return _binary("subtract", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def multiply(a, b):
    return _binary("multiply", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def divide(a, b):
    return _binary("divide", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def _unary(a, forward, vjp_fn):
    a = as_node(a)
    out_value = forward(a.value)

    def vjp(g):
        return (vjp_fn(g, a.value, out_value),)

    return Node(out_value, parents=(a,), vjp=vjp)


def negate(a):
    return _unary(a, lambda x: -x, lambda g, x, o: -g)


def exp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a):
    a = as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError(f"log requires positive input, got minimum {a.value.min()}")
    return _unary(a, np.log, lambda g, x, o: g / x)


def sqrt(a):
    a = as_node(a)
    if np.any(a.value < 0.0):
        raise DomainError(f"sqrt requires non-negative input, got minimum {a.value.min()}")
    return _unary(a, np.sqrt, lambda g, x, o: 0.5 * g / o)


def square(a):
    return _unary(a, np.square, lambda g, x, o: 2.0 * g * x)


def absolute(a):
    # subgradient 0 at exactly 0
    return _unary(a, np.abs, lambda g, x, o: g * np.sign(x))


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0.0))


def maximum(a, floor):
    """Elementwise max(a, floor) for a scalar floor; gradient flows where a >= floor."""
    floor = float(floor)
    return _unary(a, lambda x: np.maximum(x, floor), lambda g, x, o: g * (x >= floor))


def softplus(a, beta=1.0):
    """(1/beta) * log(1 + exp(beta*x)) with the overflow-safe branch; adjoint logistic(beta*x)."""
    if beta <= 0.0:
        raise ValueError(f"softplus requires beta > 0, got {beta}")
    return _unary(a, lambda x: special.softplus(x, beta),
                  lambda g, x, o: g * special.logistic(beta * x))


def lgamma(a):
    a = as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError(f"lgamma requires positive input, got minimum {a.value.min()}")
    return _unary(a, special.lgamma, lambda g, x, o: g * special.digamma(x))


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError("matmul", a.value.shape, b.value.shape)
    out_value = a.value @ b.value

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return Node(out_value, parents=(a, b), vjp=vjp)


def reduce_sum(a, axis=None):
    a = as_node(a)
    out_value = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return Node(out_value, parents=(a,), vjp=vjp)


def reduce_mean(a, axis=None):
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return reduce_sum(a, axis=axis) * (1.0 / count)


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    out_value = np.concatenate([n.value for n in nodes], axis=axis)
    offsets = np.cumsum([0] + [n.value.shape[axis] for n in nodes])

    def vjp(g):
        pieces = []
        for i in range(len(nodes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return Node(out_value, parents=tuple(nodes), vjp=vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = as_node(a)
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_value = a.value[sl]

    def vjp(g):
        full = np.zeros_like(a.value)
        full[sl] = g
        return (full,)

    return Node(out_value, parents=(a,), vjp=vjp)


def reshape(a, shape):
    a = as_node(a)
    out_value = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return Node(out_value, parents=(a,), vjp=vjp)


def topo_order(root):
    """Parents-before-children order of every node reachable from root."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into node.grad for every reachable node.

    The root must be scalar (one element). Calling backward again without
    resetting grads adds another copy of the sensitivities.
    """
    if root.value.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = topo_order(root)
    seed = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = seed.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            prev = seed.get(id(parent))
            seed[id(parent)] = pg if prev is None else prev + pg
