"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy array (float32 for experiments,
float64 for verification). Operations record their inputs and a backward
closure on the output node; ``backward`` replays the closures in reverse
topological order. Only nodes on a path to a gradient-requiring leaf are
recorded, so constant subgraphs cost nothing at backward time.
"""

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _tracked(self):
        return self.requires_grad or bool(self._prev)

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- graph plumbing --------------------------------------------------

    @staticmethod
    def _make(value, parents, backward):
        out = Tensor(value)
        tracked = tuple(p for p in parents if p._tracked())
        if tracked:
            out._prev = tracked
            out._backward = backward
        return out

    def backward(self):
        """Accumulate d(self)/d(node) into `.grad` over the whole graph."""
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar loss node")
        topo = []
        visited = set()
        stack = [(self, iter(self._prev))]
        visited.add(id(self))
        while stack:
            node, it = stack[-1]
            child = next(it, None)
            if child is None:
                stack.pop()
                topo.append(node)
            elif id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._prev)))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- elementwise arithmetic ------------------------------------------

    def _coerce(self, other):
        return other if isinstance(other, Tensor) else Tensor(
            np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bk():
            if a._tracked():
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b._tracked():
                b.grad += _unbroadcast(out.grad, b.data.shape)

        out = Tensor._make(a.data + b.data, (a, b), bk)
        return out

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bk():
            if a._tracked():
                a.grad -= out.grad

        out = Tensor._make(-a.data, (a,), bk)
        return out

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bk():
            if a._tracked():
                a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
            if b._tracked():
                b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

        out = Tensor._make(a.data * b.data, (a, b), bk)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bk():
            if a._tracked():
                a.grad += _unbroadcast(out.grad / b.data, a.data.shape)
            if b._tracked():
                b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data),
                                       b.data.shape)

        out = Tensor._make(a.data / b.data, (a, b), bk)
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self

        def bk():
            if a._tracked():
                a.grad += out.grad * p * a.data ** (p - 1)

        out = Tensor._make(a.data ** p, (a,), bk)
        return out

    def sqrt(self):
        a = self
        val = np.sqrt(a.data)

        def bk():
            if a._tracked():
                # subgradient at exactly 0 is defined as 0
                safe = np.where(val > 0, val, 1.0)
                a.grad += np.where(val > 0, out.grad / (2.0 * safe), 0.0)

        out = Tensor._make(val, (a,), bk)
        return out

    def exp(self):
        a = self
        val = np.exp(a.data)

        def bk():
            if a._tracked():
                a.grad += out.grad * val

        out = Tensor._make(val, (a,), bk)
        return out

    def log(self):
        a = self

        def bk():
            if a._tracked():
                a.grad += out.grad / a.data

        out = Tensor._make(np.log(a.data), (a,), bk)
        return out

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bk():
            if a._tracked():
                a.grad += out.grad.reshape(old)

        out = Tensor._make(a.data.reshape(shape), (a,), bk)
        return out

    def sum(self, axis=None, keepdims=False):
        a = self
        val = a.data.sum(axis=axis, keepdims=keepdims)

        def bk():
            if a._tracked():
                g = out.grad
                if not keepdims and axis is not None:
                    ax = axis if isinstance(axis, tuple) else (axis,)
                    ax = tuple(i % a.data.ndim for i in ax)
                    g = np.expand_dims(g, ax)
                a.grad += np.broadcast_to(g, a.data.shape)

        out = Tensor._make(val, (a,), bk)
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for i in ax:
                n *= self.data.shape[i]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- neural net ops --------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0

        def bk():
            if a._tracked():
                a.grad += out.grad * mask

        out = Tensor._make(np.where(mask, a.data, 0.0), (a,), bk)
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")

        def bk():
            if a._tracked():
                a.grad += out.grad @ b.data.T
            if b._tracked():
                b.grad += a.data.T @ out.grad

        out = Tensor._make(a.data @ b.data, (a, b), bk)
        return out


def matmul(a, b):
    return a @ b


def relu(x):
    return x.relu()


# -- convolution ---------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, ho, wo),
        (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return cols, ho, wo


def _conv2d_forward(x, k, stride, pad):
    cols, ho, wo = _im2col(x, k.shape[2], k.shape[3], stride, pad)
    out = np.tensordot(cols, k, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def conv2d_weight_grad(x, grad_out, kh, kw, stride, pad):
    """d(conv2d)/d(kernel) given the input and the output adjoint."""
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    return np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))


def _conv2d_input_grad(grad_out, k, x_shape, stride, pad):
    n, c, h, w = x_shape
    _, _, kh, kw = k.shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    # gk[n,c,u,v,i,j] = sum_o grad_out[n,o,i,j] * k[o,c,u,v]
    gk = np.tensordot(grad_out, k, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + ho * stride:stride,
                v:v + wo * stride:stride] += gk[:, :, u, v]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x, k, stride=1, pad=0):
    """Cross-correlation (no kernel flip) with zero padding."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OCHW kernel")
    if x.data.shape[1] != k.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape[1]} vs "
            f"kernel {k.data.shape[1]}")
    kh, kw = k.data.shape[2], k.data.shape[3]
    if kh > x.data.shape[2] + 2 * pad or kw > x.data.shape[3] + 2 * pad:
        raise ShapeError("kernel larger than padded input")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    val, _ = _conv2d_forward(x.data, k.data, stride, pad)
    a, b = x, k

    def bk():
        if b._tracked():
            b.grad += conv2d_weight_grad(a.data, out.grad, kh, kw, stride, pad)
        if a._tracked():
            a.grad += _conv2d_input_grad(out.grad, b.data, a.data.shape,
                                         stride, pad)

    out = Tensor._make(val, (a, b), bk)
    return out


def global_avg_pool(x):
    """Spatial mean per channel: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW input")
    return x.mean(axis=(2, 3))


# -- losses --------------------------------------------------------------


def _log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer class labels."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    ls = _log_softmax(logits.data)
    val = -ls[np.arange(n), labels].mean()
    a = logits

    def bk():
        if a._tracked():
            g = np.exp(ls)
            g[np.arange(n), labels] -= 1.0
            a.grad += out.grad * g / n

    out = Tensor._make(np.asarray(val, dtype=logits.data.dtype), (a,), bk)
    return out


def kl_div_logits(p_logits, q_logits):
    """Mean over rows of KL(softmax(p) || softmax(q))."""
    if p_logits.data.shape != q_logits.data.shape:
        raise ShapeError("kl_div_logits expects matching shapes")
    n = p_logits.data.shape[0]
    lp = _log_softmax(p_logits.data)
    lq = _log_softmax(q_logits.data)
    p = np.exp(lp)
    row_kl = (p * (lp - lq)).sum(axis=1)
    val = row_kl.mean()
    a, b = p_logits, q_logits

    def bk():
        if a._tracked():
            a.grad += out.grad / n * p * ((lp - lq) - row_kl[:, None])
        if b._tracked():
            b.grad += out.grad / n * (np.exp(lq) - p)

    out = Tensor._make(np.asarray(val, dtype=p_logits.data.dtype), (a, b), bk)
    return out


# -- parameter containers ------------------------------------------------


class ParamStore:
    """Named trainable tensors shared by every consumer of the model."""

    def __init__(self):
        self._params = {}

    def add(self, name, data, dtype=None):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(_as_float_array(data, dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()


def backprop(loss, params, names=None):
    """Run reverse mode from a scalar loss; return a name->gradient map.

    Parameters absent from the loss graph get an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError("backprop requires a scalar loss")
    for _, p in params.items():
        p.grad = None  # drop stale gradients from earlier passes
    loss.backward()
    if names is None:
        names = params.names()
    grads = {}
    for name in names:
        p = params[name]
        grads[name] = (p.grad.copy() if p.grad is not None
                       else np.zeros_like(p.data))
    return grads


def finite_diff_grad(f, params, h=1e-5, names=None):
    """Central-difference gradient oracle: (f(p+h) - f(p-h)) / 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    if names is None:
        names = params.names()
    grads = {}
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads
