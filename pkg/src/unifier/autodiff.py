"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a closure producing the adjoints of
its inputs. ``Tensor.backward`` orders the recorded graph topologically (the
tape) and visits each node once. Gradients accumulate on leaves until
``zero_grad`` is called.

Leading batch dimensions are supported wherever the model needs them, so a
minibatch of token sequences is a ``[batch, seq, d]`` tensor.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .exceptions import ContractError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "tensor_init",
    "as_tensor",
    "matmul",
    "layer_norm",
    "softmax",
    "log_softmax",
    "mean_reduce",
    "concat_last",
    "gelu",
    "sigmoid",
    "cross_entropy",
    "bce_with_logits",
    "smooth_l1",
    "stack_mean",
    "grad_check",
]

DTYPE = np.float64

_GRAD_ENABLED = True


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, old-model passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # -- backward -----------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        Repeated calls accumulate; call ``zero_grad`` on the parameters (or use the
        optimizer's ``zero_grad``) between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {list(self.shape)}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        tape = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operator sugar -----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root):
    order = []
    seen = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# construction


def tensor_init(shape, mode="zeros", seed=None, std=1.0, requires_grad=False):
    """Create a tensor of ``shape`` filled per ``mode``.

    ``mode`` is one of ``zeros``, ``ones``, ``uniform`` (U[-1, 1)) or ``normal``
    (N(0, std^2)). Seeded modes require an explicit integer seed; identical
    (shape, mode, seed, std) always produce bit-identical data.
    """
    shape = tuple(int(n) for n in shape)
    if not shape or any(n < 1 for n in shape):
        raise ShapeError(f"invalid shape {list(shape)}: every dimension must be >= 1")
    if mode == "zeros":
        data = np.zeros(shape)
    elif mode == "ones":
        data = np.ones(shape)
    elif mode in ("uniform", "normal"):
        if seed is None:
            raise ContractError(f"mode {mode!r} requires an explicit seed")
        rng = np.random.default_rng(int(seed))
        if mode == "uniform":
            data = rng.uniform(-1.0, 1.0, size=shape)
        else:
            data = rng.normal(0.0, std, size=shape)
    else:
        raise ContractError(f"unknown init mode {mode!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def power(a, exponent):
    exponent = float(exponent)
    return _result(
        a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow"
    )


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward, "gelu")


def identity(a):
    return a


# ---------------------------------------------------------------------------
# shape ops and reductions


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in items)


def getitem(a, index):
    shape = a.shape
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def matmul(a, b):
    """Contract the last axis of ``a`` with the second-to-last of ``b``.

    ``a`` is ``[..., m, k]``; ``b`` is ``[k, n]`` or batch-compatible ``[..., k, n]``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs b with rank >= 2, got {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def concat_last(xs):
    """Concatenate same-shaped tensors along the last axis; slot k holds ``xs[k]``."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_last needs at least one input")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"concat_last inputs differ in shape: {list(shape)} vs {list(x.shape)}")
    if len(xs) == 1:
        return xs[0]
    d = shape[-1]
    out = np.concatenate([x.data for x in xs], axis=-1)

    def backward(g):
        return tuple(g[..., k * d : (k + 1) * d] if x.requires_grad else None for k, x in enumerate(xs))

    return _result(out, tuple(xs), backward, "concat")


def stack_mean(xs):
    """Elementwise mean of equally shaped tensors."""
    xs = [as_tensor(x) for x in xs]
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"cannot average tensors of shapes {list(shape)} and {list(x.shape)}")
    k = len(xs)
    out = sum(x.data for x in xs) / k
    return _result(out, tuple(xs), lambda g: tuple(g / k for _ in xs), "stack_mean")


def mean_reduce(x, axis):
    """Channel means of a token tensor ``[..., seq, d]``.

    ``axis="feature"`` averages over tokens (length-d result);
    ``axis="embedding"`` averages over feature channels (length-seq result).
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"mean_reduce needs a [seq, d] tensor, got rank {x.ndim}")
    if axis == "feature":
        return tmean(x, axis=-2)
    if axis == "embedding":
        return tmean(x, axis=-1)
    raise ContractError(f"unknown reduction axis {axis!r}")


# ---------------------------------------------------------------------------
# normalisation and probabilistic ops


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def _log_softmax(data, axis):
    z = data - data.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    out = _log_softmax(x.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if eps <= 0:
        raise ContractError("layer_norm requires eps > 0 (division guard)")
    if d < 2:
        raise ContractError("layer_norm requires at least two features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape [{d}]")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward, "layer_norm")


def _normaliser(weights, n):
    if weights is None:
        return None, float(n)
    w = np.asarray(weights, dtype=DTYPE)
    return w, float(w.sum())


def cross_entropy(logits, targets, weights=None):
    """Mean (or weight-normalised) categorical cross-entropy over the last axis.

    ``targets`` holds integer class ids with the shape of ``logits[..., 0]``.
    Returns 0 when every weight is zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    ls = _log_softmax(logits.data, -1)
    picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
    w, norm = _normaliser(weights, targets.size)
    if norm == 0.0:
        return Tensor(0.0)
    loss = -(picked if w is None else picked * w).sum() / norm

    def backward(g):
        grad = np.exp(ls)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        if w is not None:
            grad = grad * w[..., None]
        return (grad * (g / norm),)

    return _result(loss, (logits,), backward, "cross_entropy")


def bce_with_logits(logits, targets, weights=None):
    """Binary cross-entropy on raw logits, averaged over entries (or weights)."""
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"targets shape {y.shape} does not match logits {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    w, norm = _normaliser(weights, y.size)
    if norm == 0.0:
        return Tensor(0.0)
    loss = (per if w is None else per * w).sum() / norm

    def backward(g):
        grad = _sigmoid(x) - y
        if w is not None:
            grad = grad * w
        return (grad * (g / norm),)

    return _result(loss, (logits,), backward, "bce")


def smooth_l1(pred, target, weights=None, beta=1.0):
    """Huber-style loss summed over the last axis, averaged over leading entries (or weights)."""
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} does not match prediction {pred.shape}")
    diff = pred.data - t
    ad = np.abs(diff)
    per = np.where(ad < beta, 0.5 * diff * diff / beta, ad - 0.5 * beta).sum(axis=-1)
    w, norm = _normaliser(weights, per.size)
    if norm == 0.0:
        return Tensor(0.0)
    loss = (per if w is None else per * w).sum() / norm

    def backward(g):
        grad = np.where(ad < beta, diff / beta, np.sign(diff))
        if w is not None:
            grad = grad * w[..., None]
        return (grad * (g / norm),)

    return _result(loss, (pred,), backward, "smooth_l1")


# ---------------------------------------------------------------------------
# verification


_FD_ROUNDOFF = 16.0 * np.finfo(np.float64).eps


def grad_check(f, x, h=1e-5):
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``x`` is a tensor or a list of tensors; ``f`` is called as ``f(x)`` for a
    single tensor and ``f()`` for a list (the closure reads the tensors it
    owns). Returns the max over all coordinates of
    ``max(0, |analytic - numeric| - noise) / (|analytic| + 1e-8)``, where
    ``noise = 16 * eps * (|f(x+h)| + |f(x-h)|) / (2h)`` bounds the rounding
    error of the difference quotient itself. Without it, a coordinate whose
    true gradient is near 1e-8 fails on float64 rounding alone.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ContractError(f"step h={h} outside [1e-6, 1e-4]")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def evaluate():
        return f(x) if single else f()

    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.array(t.data, order="C")
    try:
        out = evaluate()
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {list(out.shape)}")
        out.backward()
        worst = 0.0
        with no_grad():
            for t in xs:
                analytic = np.zeros(t.shape) if t.grad is None else t.grad
                flat = t.data.reshape(-1)
                an = analytic.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = evaluate().item()
                    flat[i] = orig - h
                    fm = evaluate().item()
                    flat[i] = orig
                    numeric = (fp - fm) / (2.0 * h)
                    noise = _FD_ROUNDOFF * (abs(fp) + abs(fm)) / (2.0 * h)
                    err = max(0.0, abs(an[i] - numeric) - noise) / (abs(an[i]) + 1e-8)
                    worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
