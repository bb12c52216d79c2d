"""Dense float64 tensors with an operation-level reverse-mode tape."""
from contextlib import contextmanager

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable taping inside the block (inference, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

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

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    # derivative at exactly 0 is taken as 0
    mask = x.data > 0.0

    def backward(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    s = expit(x.data)

    def backward(g):
        _accum(x, g * s * (1.0 - s))

    return _make(s, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - t * t))

    return _make(t, (x,), backward)


def identity(x):
    return as_tensor(x)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "linear": identity}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} do not conform")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def take(x, index):
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"index {index!r} invalid for shape {x.shape}: {exc}") from None

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        _accum(x, full)

    return _make(np.array(out, dtype=np.float64), (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    old = x.shape

    def backward(g):
        _accum(x, g.reshape(old))

    return _make(out, (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inverse))

    return _make(np.transpose(x.data, axes), (x,), backward)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = sorted(a % x.ndim for a in axes)
            for a in axes:
                g = np.expand_dims(g, a)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def l2_norm(x, axis=-1):
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def backward(g):
        n = np.expand_dims(norm, axis)
        safe = np.where(n > 0.0, n, 1.0)
        scale = np.where(n > 0.0, np.expand_dims(g, axis) / safe, 0.0)
        _accum(x, scale * x.data)

    return _make(norm, (x,), backward)


def power(x, exponent):
    """Elementwise ``x ** exponent``; the gradient is taken as 0 where x == 0."""
    x = as_tensor(x)
    p = float(exponent)
    if p == 1.0:
        return x
    out = np.power(x.data, p)

    def backward(g):
        nz = x.data != 0.0
        base = np.where(nz, x.data, 1.0)
        _accum(x, np.where(nz, g * p * np.power(base, p - 1.0), 0.0))

    return _make(out, (x,), backward)


def neighbor_max(h, mask):
    """Max over neighbours along the node axis.

    ``h`` is ``[..., N, F]`` and ``mask`` a boolean ``[N, N]`` adjacency;
    rows without neighbours yield 0.
    """
    h = as_tensor(h)
    mask = np.asarray(mask, dtype=bool)
    n = h.shape[-2]
    if mask.shape != (n, n):
        raise ShapeError(f"neighbor_max: mask shape {mask.shape} does not match node axis of {h.shape}")
    # candidates[..., i, j, f] = h[..., j, f] where j is a neighbour of i
    cand = np.where(mask[:, :, None], h.data[..., None, :, :], -np.inf)
    arg = np.argmax(cand, axis=-2)
    has = mask.any(axis=1)
    out = np.take_along_axis(cand, arg[..., None, :], axis=-2)[..., 0, :]
    out = np.where(has[:, None], out, 0.0)

    def backward(g):
        full = np.zeros(h.shape[:-2] + (n, n, h.shape[-1]))
        gm = np.where(has[:, None], g, 0.0)
        np.put_along_axis(full, arg[..., None, :], gm[..., None, :], axis=-2)
        _accum(h, full.sum(axis=-3))

    return _make(out, (h,), backward)


def backward(loss):
    """Populate ``grad`` on every tensor that requires it, via reverse accumulation."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        # release intermediate buffers; leaves keep their gradients
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None
