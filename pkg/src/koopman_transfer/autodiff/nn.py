"""Parameter containers and the handful of layers the models need."""

import numpy as np

from .tensor import Tensor, layer_norm, linear


class Parameter(Tensor):
    """A learnable leaf tensor.  Freezing flips ``requires_grad`` but keeps it a parameter."""

    def __init__(self, data, requires_grad=True, name=None):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=requires_grad, name=name)


def kaiming_uniform(shape, fan_in, rng):
    """He-uniform initialisation, bound sqrt(6 / fan_in)."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_normal(shape, std, rng):
    if std <= 0:
        raise ValueError("std must be positive")
    return rng.normal(0.0, std, size=shape)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else (value,)
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if name in state:
                value = np.asarray(state[name], dtype=np.float64)
                if value.shape != p.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = value.copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map ``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, n_in, n_out, weight, bias=None):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(n_out) if bias is None else bias)
        if self.weight.shape != (n_in, n_out):
            raise ValueError(f"weight shape {self.weight.shape} != {(n_in, n_out)}")

    @classmethod
    def kaiming(cls, n_in, n_out, rng):
        return cls(n_in, n_out, kaiming_uniform((n_in, n_out), n_in, rng))

    @classmethod
    def normal(cls, n_in, n_out, rng, std):
        return cls(n_in, n_out, init_normal((n_in, n_out), std, rng))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n, eps=1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(n))
        self.bias = Parameter(np.zeros(n))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)
