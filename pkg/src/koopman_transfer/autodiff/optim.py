"""Adam and AdamW with bias correction."""

import math

import numpy as np

from ..errors import ShapeMismatch


class Adam:
    """Adam.  ``weight_decay`` is classic L2 added to the gradient unless ``decoupled``."""

    decoupled = False

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def kind(self):
        return "AdamW" if self.decoupled else "Adam"

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
            if self.weight_decay:
                if self.decoupled:
                    p.data = p.data * (1.0 - self.lr * self.weight_decay)
                else:
                    g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2) + self.eps
            p.data = p.data - self.lr * (m / c1) / denom

    def state_dict(self):
        out = {"step_count": np.array([float(self.step_count)]), "lr": np.array([self.lr])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        return out


class AdamW(Adam):
    """Adam with decoupled weight decay: param *= (1 - lr * wd) before the Adam update."""

    decoupled = True

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        super().__init__(params, lr, betas, eps, weight_decay)


def make_optimizer(kind, params, lr, weight_decay=0.0):
    kinds = {"adam": Adam, "adamw": AdamW}
    try:
        cls = kinds[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}") from None
    return cls(params, lr=lr, weight_decay=weight_decay)


def exponential_lr(base_lr, gamma, epoch):
    return base_lr * math.pow(gamma, epoch)
