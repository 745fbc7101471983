"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records the primitive, its operands and a forward recompute
closure on the produced tensor, so the implicit tape can be replayed
bit-exactly and walked backwards in topological order. Gradients are exact
reverse-mode; `stop_gradient` is an identity forward and a hard zero
backward.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


def _as_array(value):
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad, shape):
    # Sum gradient over axes that numpy broadcasting expanded.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_op", "_parents", "_backward", "_forward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._op = "leaf"
        self._parents = ()
        self._backward = None
        self._forward = None

    # ---- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # ---- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def abs(self):
        return tabs(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


def tensor(value, requires_grad=False, name=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def _node(data, op, parents, backward, forward):
    out = Tensor(data)
    out._op = op
    out._parents = tuple(parents)
    out._backward = backward
    out._forward = forward
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _coerce(a, b, op):
    a = tensor(a)
    b = tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


# ---- primitives ---------------------------------------------------------


def add(a, b):
    a, b = _coerce(a, b, "add")
    return _node(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        lambda: a.data + b.data,
    )


def sub(a, b):
    a, b = _coerce(a, b, "sub")
    return _node(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        lambda: a.data - b.data,
    )


def mul(a, b):
    a, b = _coerce(a, b, "mul")
    return _node(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        lambda: a.data * b.data,
    )


def div(a, b):
    a, b = _coerce(a, b, "div")
    return _node(
        a.data / b.data,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        lambda: a.data / b.data,
    )


def neg(a):
    a = tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,), lambda: -a.data)


def matmul(a, b):
    a = tensor(a)
    b = tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        lambda: a.data @ b.data,
    )


def concat(tensors, axis=1):
    ts = [tensor(t) for t in tensors]
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ShapeError("concat", *[t.shape for t in ts])
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(ts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _node(
        np.concatenate([t.data for t in ts], axis=axis),
        "concat",
        ts,
        backward,
        lambda: np.concatenate([t.data for t in ts], axis=axis),
    )


def narrow(a, key):
    a = tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _node(a.data[key], "slice", (a,), backward, lambda: a.data[key])


def reshape(a, shape):
    a = tensor(a)
    return _node(
        a.data.reshape(shape),
        "reshape",
        (a,),
        lambda g: (g.reshape(a.shape),),
        lambda: a.data.reshape(shape),
    )


def transpose(a):
    a = tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,), lambda: a.data.T.copy())


def relu(a):
    a = tensor(a)
    return _node(
        np.maximum(a.data, 0.0),
        "relu",
        (a,),
        lambda g: (g * (a.data > 0.0),),
        lambda: np.maximum(a.data, 0.0),
    )


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = tensor(a)
    value = _sigmoid_values(a.data)
    return _node(
        value,
        "sigmoid",
        (a,),
        lambda g: (g * value * (1.0 - value),),
        lambda: _sigmoid_values(a.data),
    )


def _softmax_values(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    a = tensor(a)
    value = _softmax_values(a.data, axis)

    def backward(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - inner),)

    return _node(value, "softmax", (a,), backward, lambda: _softmax_values(a.data, axis))


def tlog(a):
    a = tensor(a)
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,), lambda: np.log(a.data))


def texp(a):
    a = tensor(a)
    value = np.exp(a.data)
    return _node(value, "exp", (a,), lambda g: (g * value,), lambda: np.exp(a.data))


def tabs(a):
    a = tensor(a)
    return _node(
        np.abs(a.data),
        "abs",
        (a,),
        lambda g: (g * np.sign(a.data),),
        lambda: np.abs(a.data),
    )


def clamp(a, lo, hi):
    a = tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(
        np.clip(a.data, lo, hi),
        "clamp",
        (a,),
        lambda g: (g * inside,),
        lambda: np.clip(a.data, lo, hi),
    )


def tsum(a, axis=None, keepdims=False):
    a = tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return _node(
        a.data.sum(axis=axis, keepdims=keepdims),
        "sum",
        (a,),
        backward,
        lambda: a.data.sum(axis=axis, keepdims=keepdims),
    )


def tmean(a, axis=None, keepdims=False):
    a = tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded / count, a.shape).copy(),)

    return _node(
        a.data.mean(axis=axis, keepdims=keepdims),
        "mean",
        (a,),
        backward,
        lambda: a.data.mean(axis=axis, keepdims=keepdims),
    )


def stop_gradient(a):
    a = tensor(a)
    out = _node(a.data.copy(), "stop-gradient", (a,), None, lambda: a.data.copy())
    out.requires_grad = False
    return out


def greater_equal(a, threshold):
    """Hard 0/1 indicator; carries no gradient path by construction."""
    a = tensor(a)
    out = _node(
        (a.data >= threshold).astype(np.float64),
        "greater-equal",
        (a,),
        None,
        lambda: (a.data >= threshold).astype(np.float64),
    )
    out.requires_grad = False
    return out


# ---- tape ----------------------------------------------------------------


def _topo_order(root):
    order = []
    visited = set()
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


class Tape:
    """Topologically ordered record of the primitives that produced a value."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        return cls(_topo_order(root))

    def replay(self):
        """Recompute every non-leaf node from its operands, bit-exactly."""
        for node in self.nodes:
            if node._forward is not None:
                node.data = node._forward()
        return self.nodes[-1].data


def backward(loss, params=None):
    """Reverse-mode gradients of a scalar loss.

    Returns a map from requires-grad leaf tensors to gradient arrays (zeros
    for leaves the loss never touches, e.g. behind stop-gradient). Also
    stores each gradient on the tensor's .grad. `params` optionally narrows
    and orders the returned map.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape)
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        if node._op == "leaf" and node.requires_grad:
            leaves.append(node)
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            slot = grads.get(id(parent))
            if slot is None:
                grads[id(parent)] = pg.copy() if isinstance(pg, np.ndarray) else np.asarray(pg)
            else:
                slot += pg
    if params is None:
        params = leaves
    result = {}
    for leaf in params:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        result[leaf] = g
    return result
