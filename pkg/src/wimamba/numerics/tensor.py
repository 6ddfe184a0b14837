"""Dense tensors with reverse-mode differentiation.

Every differentiable operation appends a record (saved inputs plus an
adjoint closure) to the implicit tape formed by the creation order of the
results. :meth:`Tensor.backward` replays the records reachable from the loss
in reverse creation order, which makes gradient accumulation deterministic.

Broadcasting is deliberately limited to scalar-vs-tensor and equal shapes;
row-wise bias and gain broadcasts go through dedicated fused ops
(``linear``, ``rms_normalize``, ``conv1d_depthwise``).
"""
import itertools
from contextlib import contextmanager

import numpy as np

from . import instrument

_DEFAULT_DTYPE = np.float32
_grad_enabled = True
_seq = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_adjoint", "_seq", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biuf" and arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self._init(arr, requires_grad, (), None)

    def _init(self, arr, requires_grad, parents, adjoint):
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._adjoint = adjoint
        self._seq = next(_seq)
        tracker = instrument._tracker
        if tracker is not None and arr.base is None:
            tracker.alloc(arr.nbytes)
            self._tracked = (tracker, arr.nbytes)
        else:
            self._tracked = None

    def __del__(self):
        tracked = self._tracked
        if tracked is not None:
            tracked[0].free(tracked[1])

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return _leaf(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        records = _reachable(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in records:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._adjoint is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._adjoint(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _leaf(arr, requires_grad=False):
    t = Tensor.__new__(Tensor)
    t._init(arr, requires_grad, (), None)
    return t


def _reachable(root):
    seen = {id(root)}
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    return nodes


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data):
    """A leaf tensor that requires grad."""
    t = Tensor(data)
    t.requires_grad = True
    return t


def make_result(out, parents, adjoint):
    """Wrap ``out`` as an op result, recording ``adjoint`` when any parent needs grad."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    if needs:
        t._init(out, True, parents, adjoint)
    else:
        t._init(out, False, (), None)
    return t


def _binary_operands(a, b, opname):
    # numpy scalars would promote float32 operands; python scalars do not
    if isinstance(a, np.generic):
        a = a.item()
    if isinstance(b, np.generic):
        b = b.item()
    # arrays become constant tensors so the shape rule below applies to them too
    if isinstance(a, np.ndarray):
        a = Tensor(a) if a.ndim else a.item()
    if isinstance(b, np.ndarray):
        b = Tensor(b) if b.ndim else b.item()
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{opname} needs at least one Tensor")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
            raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g, like):
    if like.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    if not isinstance(b, Tensor):
        return make_result(a.data + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return make_result(a + b.data, (b,), lambda g: (g,))
    return make_result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    if not isinstance(b, Tensor):
        return make_result(a.data - b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return make_result(a - b.data, (b,), lambda g: (-g,))
    return make_result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    if not isinstance(b, Tensor):
        return make_result(a.data * b, (a,), lambda g: (g * b,))
    if not isinstance(a, Tensor):
        return make_result(a * b.data, (b,), lambda g: (g * a,))
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
    )


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,))


def reciprocal(a):
    out = 1.0 / a.data
    return make_result(out, (a,), lambda g: (-g * out * out,))


def square(a):
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a):
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    # tanh form cannot overflow
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def _softplus(x):
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    # beyond 30 the correction is below float64 resolution of x
    return np.where(x > 30, x, out).astype(x.dtype, copy=False)


def softplus(a):
    out = _softplus(a.data)
    return make_result(out, (a,), lambda g: (g * _sigmoid(a.data),))


def silu(a):
    s = _sigmoid(a.data)
    out = a.data * s
    return make_result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


ELEMENTWISE = {
    "softplus": softplus,
    "sigmoid": sigmoid,
    "silu": silu,
    "exp": exp,
    "add": add,
    "mul": mul,
}


def elementwise(kind, *args):
    """Dispatch one of the named elementwise kernels."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


def tsum(a, axis=None):
    out = np.asarray(a.data.sum(axis=axis))
    shape = a.shape

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(out, (a,), adjoint)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    out = a.data.reshape(shape)
    old = a.shape
    return make_result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index):
    out = a.data[index]
    if out.base is not None:
        out = out.copy()

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(out, (a,), adjoint)


def take_rows(a, rows):
    """Gather rows (axis 0) by integer index."""
    rows = np.asarray(rows, dtype=np.intp)
    out = a.data[rows]

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return make_result(out, (a,), adjoint)


def flip(a, axis=0):
    out = np.flip(a.data, axis).copy()
    return make_result(out, (a,), lambda g: (np.flip(g, axis).copy(),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), adjoint)


def matmul(a, b):
    """Matrix product ``a @ b`` for a[..., m, k] and b[k, n] (or b batched like a)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and b.shape[:-2] != a.shape[:-2]):
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    instrument.add_macs(out.size * a.shape[-1])

    def adjoint(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result(out, (a, b), adjoint)


def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight.T + bias`` with weight[out, in]."""
    if x.shape[-1] != weight.shape[-1] or weight.ndim != 2:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data
    instrument.add_macs(out.size * weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def adjoint(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, adjoint)


def rms_normalize(x, gain, eps=1e-6):
    """``x / sqrt(mean(x**2) + eps) * gain`` along the last axis."""
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rms_normalize: gain {gain.shape} does not match input {x.shape}")
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    out = normed * gain.data
    d = x.shape[-1]

    def adjoint(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * normed).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gn = g * gain.data
            gx = inv * (gn - normed * (gn * normed).mean(axis=-1, keepdims=True))
        return gx, gg

    return make_result(out, (x, gain), adjoint)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), adjoint)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def adjoint(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), adjoint)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-wise ``logits``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    logp = log_softmax(logits)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return neg(mean(picked))


def mse(pred, target):
    target = as_tensor(target)
    return mean(square(sub(pred, target)))


def conv1d_depthwise(x, kernel, bias=None, causal_pad=True):
    """Per-channel 1-D convolution of x[T, C] with kernel[K, C].

    ``kernel[j]`` multiplies the input ``j`` steps in the past, so a kernel of
    ``[1, 0, ...]`` is the identity and ``[0, 1, 0, ...]`` a one-step delay.
    Without ``causal_pad`` the output is shortened to ``T - K + 1`` steps.
    """
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d_depthwise: input {x.shape} vs kernel {kernel.shape}")
    K = kernel.shape[0]
    T, C = x.shape
    xd = x.data
    if causal_pad:
        xp = np.concatenate([np.zeros((K - 1, C), dtype=xd.dtype), xd])
    else:
        xp = xd
    T_out = xp.shape[0] - K + 1
    if T_out < 1:
        raise DimensionError(f"conv1d_depthwise: kernel {K} longer than input {T}")
    k = kernel.data
    out = xp[K - 1:K - 1 + T_out] * k[0]
    for j in range(1, K):
        out += xp[K - 1 - j:K - 1 - j + T_out] * k[j]
    if bias is not None:
        out += bias.data
    instrument.add_macs(T_out * C * K)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def adjoint(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.empty_like(k) if kernel.requires_grad else None
        for j in range(K):
            window = slice(K - 1 - j, K - 1 - j + T_out)
            if gxp is not None:
                gxp[window] += g * k[j]
            if gk is not None:
                gk[j] = (g * xp[window]).sum(axis=0)
        gx = None
        if gxp is not None:
            gx = gxp[K - 1:] if causal_pad else gxp
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=0) if bias.requires_grad else None,)
        return grads

    return make_result(out, parents, adjoint)


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t
