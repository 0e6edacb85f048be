"""Dense networks, parameter storage and the Adam optimizer."""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError
from . import autodiff as ad
from .autodiff import Tensor

ACTIVATION_CODES = {"identity": 0, "relu": 1, "softplus": 2, "tanh": 3, "sigmoid": 4}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}


class ParamStore:
    """Named trainable tensors plus Adam moment buffers.

    Each entry is a leaf :class:`Tensor`; its ``grad`` attribute is the
    gradient buffer and always has the parameter's shape once populated.
    """

    def __init__(self):
        self.params = OrderedDict()
        self.moments = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise InvalidArgumentError(f"parameter {name!r} has non-finite entries")
        t = Tensor(value.copy(), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def arrays(self, prefix=""):
        return OrderedDict((k, t.data) for k, t in self.params.items() if k.startswith(prefix))

    def assign(self, arrays, prefix=""):
        """Overwrite parameter values in place; every expected name must be present."""
        for name, t in self.params.items():
            if not name.startswith(prefix):
                continue
            key = name[len(prefix):] if name[len(prefix):] in arrays else name
            if key not in arrays:
                raise KeyError(f"missing tensor {name!r} in loaded parameters")
            value = np.asarray(arrays[key], dtype=np.float64)
            if value.shape != t.data.shape:
                raise InvalidArgumentError(
                    f"tensor {name!r} has shape {value.shape}, expected {t.data.shape}"
                )
            t.data = value.copy()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        return OrderedDict(
            (k, t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()
        )

    def adam_step(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        adam_step(self, lr, beta1, beta2, eps)


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
    """One bias-corrected Adam update over every parameter with a gradient.

    ``lr_scales`` maps a name prefix to a step-size multiplier.
    """
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            continue
        m, v = store.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.moments[name] = (m, v)
        step = lr
        for prefix, scale in (lr_scales or {}).items():
            if name.startswith(prefix):
                step = lr * scale
        p.data = p.data - step * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor
    activation: str

    @property
    def in_dim(self):
        return self.weight.data.shape[1]

    @property
    def out_dim(self):
        return self.weight.data.shape[0]


class DenseNet:
    """Stack of affine layers, each followed by an activation.

    Parameters live in a shared :class:`ParamStore` under ``prefix``, named
    ``{prefix}.{i}.weight`` / ``{prefix}.{i}.bias``.
    """

    def __init__(self, store, prefix, dims, activations, rng=None, init="he"):
        if len(activations) != len(dims) - 1:
            raise InvalidArgumentError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATION_CODES:
                raise InvalidArgumentError(f"unknown activation {a!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix
        self.layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            if init == "zeros":
                w = np.zeros((n_out, n_in))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
                if init == "small" and i == len(dims) - 2:
                    # output starts near its bias whatever the input scale
                    w *= 0.01
            weight = store.add(f"{prefix}.{i}.weight", w)
            bias = store.add(f"{prefix}.{i}.bias", np.zeros(n_out))
            self.layers.append(DenseLayer(weight, bias, activations[i]))

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    def _check(self, x):
        if x.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"input dimension {x.shape[-1]} does not match layer width {self.in_dim}")

    def forward(self, x, dtype=np.float64):
        """Plain numpy evaluation at ``dtype`` precision."""
        x = np.asarray(x, dtype=dtype)
        self._check(x)
        for layer in self.layers:
            w = layer.weight.data.astype(dtype)
            b = layer.bias.data.astype(dtype)
            x = ad.ACTIVATIONS[layer.activation](x @ w.T + b).astype(dtype)
        return x

    def __call__(self, x):
        """Graph evaluation; ``x`` may be a Tensor or an array."""
        self._check(x)
        for layer in self.layers:
            x = ad.ACTIVATIONS[layer.activation](ad.add(ad.matmul(x, ad.transpose(layer.weight)), layer.bias))
        return x

    def backward(self, x, upstream):
        """Gradients of ``<upstream, net(x)>`` with respect to ``x`` and every parameter.

        Returns ``(grad_x, {param_name: grad})``. Parameter ``.grad`` buffers
        are left untouched.
        """
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        saved = [(layer.weight.grad, layer.bias.grad) for layer in self.layers]
        for layer in self.layers:
            layer.weight.grad = None
            layer.bias.grad = None
        out = self(xt)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != out.shape:
            raise InvalidArgumentError(f"upstream shape {upstream.shape} != output shape {out.shape}")
        out.backward(upstream)
        grads = {}
        for layer, (gw, gb) in zip(self.layers, saved):
            grads[layer.weight.name] = layer.weight.grad
            grads[layer.bias.name] = layer.bias.grad
            layer.weight.grad, layer.bias.grad = gw, gb
        return xt.grad, grads
