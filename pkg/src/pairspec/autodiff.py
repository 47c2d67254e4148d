"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the encoder, kernel heads, and losses need. Graphs are
built per evaluation and freed afterwards; all math stays in float64 so runs
are bit-reproducible for a fixed seed.
"""

import numpy as np


def _unbroadcast(grad, shape):
    # Sum gradient over axes numpy broadcast when producing `grad`.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the computation graph. Wraps a float64 ndarray."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        """Accumulate gradients of this scalar into every reachable parameter."""
        if self.value.shape != ():
            raise ValueError("backward() requires a scalar root")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node.parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # Operator sugar. Plain numbers and arrays are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value):
    """Leaf tensor whose gradient is tracked."""
    t = Tensor(np.array(value, dtype=np.float64))
    t.requires_grad = True
    return t


def constant(value):
    return Tensor(value)


def _binary(a, b, out, da, db):
    def backward_fn(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(da(grad), a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(db(grad), b.value.shape))

    return Tensor(out, (a, b), backward_fn)


def add(a, b):
    return _binary(a, b, a.value + b.value, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, a.value - b.value, lambda g: g, lambda g: -g)


def mul(a, b):
    return _binary(a, b, a.value * b.value, lambda g: g * b.value, lambda g: g * a.value)


def div(a, b):
    out = a.value / b.value
    return _binary(a, b, out, lambda g: g / b.value, lambda g: -g * out / b.value)


def matmul(a, b):
    out = a.value @ b.value

    def backward_fn(grad):
        if a.requires_grad:
            a._accumulate(grad @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ grad)

    return Tensor(out, (a, b), backward_fn)


def transpose(a):
    def backward_fn(grad):
        if a.requires_grad:
            a._accumulate(grad.T)

    return Tensor(a.value.T, (a,), backward_fn)


def _unary(a, out, da):
    def backward_fn(grad):
        if a.requires_grad:
            a._accumulate(da(grad))

    return Tensor(out, (a,), backward_fn)


def exp(a):
    out = np.exp(a.value)
    return _unary(a, out, lambda g: g * out)


def log(a):
    return _unary(a, np.log(a.value), lambda g: g / a.value)


def tanh(a):
    out = np.tanh(a.value)
    return _unary(a, out, lambda g: g * (1.0 - out * out))


def sqrt(a):
    out = np.sqrt(a.value)
    return _unary(a, out, lambda g: g * 0.5 / out)


def square(a):
    return _unary(a, a.value * a.value, lambda g: g * 2.0 * a.value)


def power(a, p):
    """a ** p for a constant exponent p."""
    out = a.value**p
    return _unary(a, out, lambda g: g * p * a.value ** (p - 1.0))


def sigmoid(a):
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ex = np.exp(a.value[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _unary(a, out, lambda g: g * out * (1.0 - out))


def softplus(a):
    # log(1 + e^x) computed without overflow.
    out = np.maximum(a.value, 0.0) + np.log1p(np.exp(-np.abs(a.value)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.value, -700, 700)))
    return _unary(a, out, lambda g: g * sig)


def tsum(a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(grad):
        if not a.requires_grad:
            return
        g = np.asarray(grad)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    return Tensor(out, (a,), backward_fn)


def tmean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else a.value.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis=None, keepdims=False):
    """Stable log-sum-exp with exact softmax gradient."""
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_full = m + np.log(total)
    out = out_full if keepdims or axis is None else np.squeeze(out_full, axis=axis)
    if axis is None:
        out = out.reshape(())
    soft = shifted / total

    def backward_fn(grad):
        if not a.requires_grad:
            return
        g = np.asarray(grad)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(g * soft)

    return Tensor(out, (a,), backward_fn)


def stop_grad(a):
    """Value passes through; gradient does not."""
    return Tensor(a.value.copy())


def where_const(mask, a, fill):
    """Select a's entries where mask holds, a constant elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.value, fill)
    return _unary(a, out, lambda g: np.where(mask, g, 0.0))


def concat_cols(parts):
    """Concatenate 2-D tensors along axis 1."""
    out = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.value.shape[1] for p in parts]

    def backward_fn(grad):
        start = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accumulate(grad[:, start : start + w])
            start += w

    return Tensor(out, tuple(parts), backward_fn)


def narrow_cols(a, start, stop):
    """Column slice a[:, start:stop] with scatter-back gradient."""

    def backward_fn(grad):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[:, start:stop] = grad
            a._accumulate(full)

    return Tensor(a.value[:, start:stop], (a,), backward_fn)


def l2_normalize(a, axis=1, eps=1e-12):
    """Rows scaled to unit Euclidean norm (differentiable).

    The epsilon keeps an exactly-zero row at zero instead of 0/0.
    """
    sq = tsum(square(a), axis=axis, keepdims=True)
    return div(a, sqrt(sq + eps))


class Adam:
    """Adam with cosine learning-rate decay to zero over total_steps."""

    def __init__(self, params, lr, total_steps, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr0 = float(lr)
        self.total_steps = int(total_steps)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def current_lr(self):
        frac = min(self.t / max(self.total_steps, 1), 1.0)
        return self.lr0 * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self):
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / corr1
            vhat = self.v[i] / corr2
            p.value = p.value - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
