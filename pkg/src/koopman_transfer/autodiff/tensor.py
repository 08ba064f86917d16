"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation on tensors that require gradients records its parents and a
closure that pushes the output gradient back to them.  ``Tensor.backward``
replays those closures in reverse topological order.
"""

from contextlib import contextmanager
import math

import numpy as np
from scipy.special import ndtr

from ..errors import DetachedNode, NotScalar, ShapeMismatch

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Tensor:
    """An n-dimensional float64 array that can take part in gradient computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def _accumulate(self, g):
        # gradients are never mutated in place, so sharing arrays is safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # ---------------------------------------------------------------- backward
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise NotScalar(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise DetachedNode("loss is not connected to any tensor that requires grad")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed after propagation
                    node.grad = None if node is not self else node.grad

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -ensure_tensor(other))

    def __rsub__(self, other):
        return add(ensure_tensor(other), -self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def tanh(self):
        return tanh(self)

    def softmax(self, mask=None, scale=1.0):
        return softmax(self, mask, scale)


def ensure_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# ------------------------------------------------------------------ elementwise


def add(a, b):
    a, b = ensure_tensor(a), ensure_tensor(b)
    _broadcast_shape(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward)


def mul(a, b):
    a, b = ensure_tensor(a), ensure_tensor(b)
    _broadcast_shape(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out_data, (a, b), backward)


def relu(x):
    x = ensure_tensor(x)
    mask = x.data > 0
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(np.multiply(g, mask))

    return _result(out_data, (x,), backward)


_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    x = ensure_tensor(x)
    cdf = ndtr(x.data)
    out_data = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return _result(out_data, (x,), backward)


def tanh(x):
    x = ensure_tensor(x)
    out_data = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out_data * out_data))

    return _result(out_data, (x,), backward)


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul(x, keep / (1.0 - rate))


# ------------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False):
    x = ensure_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out_data, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = ensure_tensor(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / count, x.shape))

    return _result(out_data, (x,), backward)


def sum_of_squares(x):
    x = ensure_tensor(x)
    out_data = np.sum(x.data * x.data)

    def backward(g):
        x._accumulate(2.0 * g * x.data)

    return _result(out_data, (x,), backward)


def mse_loss(pred, target):
    """Mean of squared differences over every element."""
    pred, target = ensure_tensor(pred), ensure_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out_data = np.sum(diff * diff) / n

    def backward(g):
        d = (2.0 / n) * g * diff
        if pred.requires_grad:
            pred._accumulate(d)
        if target.requires_grad:
            target._accumulate(-d)

    return _result(out_data, (pred, target), backward)


# --------------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b._accumulate(gb)

    return _result(out_data, (a, b), backward)


def linear(x, weight, bias=None):
    """Fused ``x @ weight + bias`` for a 2-d weight of shape (in, out)."""
    x, weight = ensure_tensor(x), ensure_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} does not fit weight {weight.shape}")
    out_data = np.matmul(x.data, weight.data)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
        out_data += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    n_in, n_out = weight.shape

    def backward(g):
        g2 = g.reshape(-1, n_out)
        if x.requires_grad:
            x._accumulate(np.matmul(g, weight.data.T))
        if weight.requires_grad:
            weight._accumulate(x.data.reshape(-1, n_in).T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _result(out_data, parents, backward)


def softmax(x, mask=None, scale=1.0):
    """Softmax of ``scale * x`` over the last axis.

    ``mask`` (broadcastable bool) marks the allowed entries; the rest get
    probability zero.
    """
    x = ensure_tensor(x)
    z = np.multiply(x.data, scale)
    if mask is not None:
        z += np.where(mask, 0.0, -np.inf)
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z, out=z)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        gp = g * p
        s = gp.sum(axis=-1, keepdims=True)
        gp -= np.multiply(p, s)
        if scale != 1.0:
            gp *= scale
        x._accumulate(gp)

    return _result(p, (x,), backward)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalise over the last axis, then apply an optional learned scale and shift."""
    x = ensure_tensor(x)
    n = x.shape[-1]
    for name, t in (("weight", weight), ("bias", bias)):
        if t is not None and t.shape != (n,):
            raise ShapeMismatch(f"layer_norm {name} {t.shape} does not match feature size {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out_data = xhat
    if weight is not None:
        out_data = out_data * weight.data
    if bias is not None:
        out_data = out_data + bias.data
    parents = [x] + [t for t in (weight, bias) if t is not None]

    def backward(g):
        if weight is not None and weight.requires_grad:
            weight._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * weight.data if weight is not None else g
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            x._accumulate(rstd * (gx - m1 - xhat * m2))

    return _result(out_data, parents, backward)


# ------------------------------------------------------------------ shape ops


def reshape(x, shape):
    x = ensure_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(out_data, (x,), backward)


def transpose(x, axes=None):
    x = ensure_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _result(out_data, (x,), backward)


def concat(tensors, axis=0):
    tensors = [ensure_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeMismatch(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _result(out_data, tensors, backward)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx):
    x = ensure_tensor(x)
    out_data = x.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        x._accumulate(full)

    return _result(out_data, (x,), backward)
