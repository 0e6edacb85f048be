"""Small reverse-mode automatic differentiation over numpy arrays.

Only what the entropy models, router and losses need: elementwise math,
broadcasting arithmetic, reductions, matmul and a few indexing ops. Every
functional op also accepts plain arrays and then falls through to numpy, so
the same loss code runs with or without a graph.
"""

import numpy as np


class Tensor:
    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _make(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        live = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        out.requires_grad = bool(live)
        out._parents = tuple(parents) if live else ()
        out._backward = backward if live else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, upstream=None):
        if upstream is None:
            if self.data.size != 1:
                raise ValueError("backward() without upstream needs a scalar output")
            upstream = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(upstream, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                pid = id(parent)
                grads[pid] = pg if pid not in grads else grads[pid] + pg

    # arithmetic
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def is_tensor(x):
    return isinstance(x, Tensor)


def constant(x):
    """Detach ``x`` from any graph (stop-gradient)."""
    return Tensor(_data(x).copy()) if isinstance(x, Tensor) else x


stop_gradient = constant


def add(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.add(a, b)
    ad, bd = _data(a), _data(b)
    out = ad + bd
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.subtract(a, b)
    ad, bd = _data(a), _data(b)
    out = ad - bd
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), -_unbroadcast(g, bd.shape)))


def mul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.multiply(a, b)
    ad, bd = _data(a), _data(b)
    out = ad * bd
    return Tensor._make(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.divide(a, b)
    ad, bd = _data(a), _data(b)
    out = ad / bd
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a, exponent):
    if not is_tensor(a):
        return np.power(a, exponent)
    ad = a.data
    out = ad**exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def matmul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.matmul(a, b)
    ad, bd = _data(a), _data(b)
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(out, (a, b), backward)


def transpose(a):
    if not is_tensor(a):
        return np.swapaxes(a, -1, -2)
    return Tensor._make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    if not is_tensor(a):
        return np.reshape(a, shape)
    old = a.data.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index):
    if not is_tensor(a):
        return np.asarray(a)[index]
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), backward)


def tsum(a, axis=None, keepdims=False):
    if not is_tensor(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = _data(a).size if axis is None else np.prod([_data(a).shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a):
    if not is_tensor(a):
        return np.exp(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a):
    if not is_tensor(a):
        return np.log(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def log1p(a):
    if not is_tensor(a):
        return np.log1p(a)
    ad = a.data
    return Tensor._make(np.log1p(ad), (a,), lambda g: (g / (1.0 + ad),))


def tanh(a):
    if not is_tensor(a):
        return np.tanh(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    if not is_tensor(a):
        return _sigmoid_np(a)
    out = _sigmoid_np(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _softplus_np(x):
    x = np.asarray(x)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def softplus(a):
    if not is_tensor(a):
        return _softplus_np(a)
    ad = a.data
    return Tensor._make(_softplus_np(ad), (a,), lambda g: (g * _sigmoid_np(ad),))


def relu(a):
    if not is_tensor(a):
        return np.maximum(a, 0)
    ad = a.data
    return Tensor._make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def identity(a):
    return a


def absolute(a):
    if not is_tensor(a):
        return np.abs(a)
    ad = a.data
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clamp_min(a, floor):
    """max(a, floor) with zero gradient where the floor is active."""
    if not is_tensor(a):
        return np.maximum(a, floor)
    ad = a.data
    return Tensor._make(np.maximum(ad, floor), (a,), lambda g: (g * (ad >= floor),))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    if not (is_tensor(a) or is_tensor(b)):
        return np.where(cond, a, b)
    ad, bd = _data(a), _data(b)
    out = np.where(cond, ad, bd)
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), ad.shape), _unbroadcast(np.where(cond, 0.0, g), bd.shape)),
    )


def custom(inputs, value, grad_fns):
    """Build a node from a precomputed ``value`` and per-input local gradients.

    ``grad_fns[i](g)`` returns the gradient flowing into ``inputs[i]``.
    """
    if not any(is_tensor(x) for x in inputs):
        return value
    return Tensor._make(np.asarray(value, dtype=np.float64), tuple(inputs), lambda g: tuple(f(g) for f in grad_fns))


ACTIVATIONS = {
    "identity": identity,
    "relu": relu,
    "softplus": softplus,
    "tanh": tanh,
    "sigmoid": sigmoid,
}
