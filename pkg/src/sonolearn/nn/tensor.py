"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a dense array (float32 storage by default; float64 for
gradient checking) and records the op graph as it is built. Calling
backward() on a scalar walks the graph in reverse topological order and
accumulates gradients into every reachable tensor with requires_grad set.

Reductions (sum, mean, norms, batch statistics) accumulate in 64-bit and
cast back to the storage dtype, which keeps finite-difference gradient
checks stable.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/EMA updates)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """Dense array plus optional gradient.

    tag marks a parameter's role ("bias" or "norm") so optimizers can exempt
    it from weight decay and trust scaling without guessing from shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "tag", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, tag=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and \
                data.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tag = tag
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

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, " \
               f"requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int)
                       else shape[0])


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, s in enumerate(shape):
        if s == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def power(a, exponent):
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def relu(a):
    mask = a.data > 0
    data = np.where(mask, a.data, 0).astype(a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(data, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False):
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    data = data.astype(a.dtype)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.dtype))
            return
        gk = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gk, a.data.shape).astype(a.dtype))

    return _make(data, (a,), backward)


def tensor_mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    s = tensor_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / float(count))


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def linear(x, w, b=None):
    """x @ w (+ b): x is (n, in), w is (in, out), b is (out,)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def _im2col3x3(x):
    """(n, c, h, w) -> contiguous (n, c*9, h*w) patch matrix, zero pad 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, 3, 3, h, w), (s0, s1, s2, s3, s2, s3)
    )
    return view.reshape(n, c * 9, h * w)


def conv2d_3x3(x, w, b):
    """2-d convolution, 3x3 kernel, stride 1, zero padding 1.

    x: (n, c_in, h, w); w: (c_out, c_in, 3, 3); b: (c_out,).
    Runs as one batched GEMM over im2col patches.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(
            f"conv2d_3x3 expects x (n,c,h,w) and w (f,c,3,3), got {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d_3x3 channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {w.shape[1]}"
        )
    n, c, h, wd = x.data.shape
    f = w.data.shape[0]
    cols = _im2col3x3(x.data)
    out = np.matmul(w.data.reshape(f, c * 9), cols)
    out += b.data[:, None]
    data = out.reshape(n, f, h, wd)

    def backward(g):
        g2 = g.reshape(n, f, h * wd)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 2)))
        if w.requires_grad:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            w._accumulate(dw.reshape(w.data.shape))
        if x.requires_grad:
            # dX is the correlation of g with spatially flipped kernels,
            # with in/out channels swapped; same im2col machinery applies
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            colsg = _im2col3x3(g)
            dx = np.matmul(wflip.reshape(c, f * 9), colsg)
            x._accumulate(dx.reshape(x.data.shape))

    return _make(data, (x, w, b), backward)


def maxpool_2x2(x):
    """Max pooling with 2x2 windows, stride 2; odd trailing rows/cols dropped."""
    if x.ndim != 4:
        raise ValueError(f"maxpool_2x2 expects (n,c,h,w), got shape {x.shape}")
    n, c, h, w = x.data.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ValueError(f"maxpool_2x2 needs h,w >= 2, got shape {x.shape}")
    xc = x.data[:, :, : ho * 2, : wo * 2]
    windows = xc.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=4)
    data = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        dwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=4)
        dxc = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dxc = dxc.reshape(n, c, ho * 2, wo * 2)
        if ho * 2 == h and wo * 2 == w:
            x._accumulate(dxc)
        else:
            dx = np.zeros_like(x.data)
            dx[:, :, : ho * 2, : wo * 2] = dxc
            x._accumulate(dx)

    return _make(data, (x,), backward)


def global_avg_pool(x):
    """(n, c, h, w) -> (n, c) spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects (n,c,h,w), got shape {x.shape}")
    n, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(g):
        if x.requires_grad:
            gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape)
            x._accumulate(gx.astype(x.dtype))

    return _make(data, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5, update_stats=True):
    """Batch normalization over the batch (and spatial dims for 4-d input).

    Train mode normalizes with batch statistics and, when update_stats is
    set, folds them into the running buffers (plain arrays, not part of the
    graph). Eval mode is a per-channel affine map using the running stats.
    """
    if x.ndim == 2:
        axes, pshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, pshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ValueError(f"batch_norm expects 2-d or 4-d input, got shape {x.shape}")
    n_ch = x.data.shape[1]
    if gamma.data.shape != (n_ch,) or beta.data.shape != (n_ch,):
        raise ValueError(
            f"batch_norm parameter shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match {n_ch} channels"
        )
    gam = gamma.data.reshape(pshape)
    bet = beta.data.reshape(pshape)
    m = int(np.prod([x.data.shape[ax] for ax in axes]))
    # float64 inputs (gradient checking) keep double accumulation; float32
    # training stays in float32, where pairwise summation is accurate enough
    acc = np.float64 if x.data.dtype == np.float64 else np.float32

    if training:
        mu = x.data.mean(axis=axes, dtype=acc)
        var = x.data.var(axis=axes, dtype=acc)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.astype(running_mean.dtype)
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.astype(acc)
        var = running_var.astype(acc)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(pshape)
    xhat = (x.data - mu.astype(x.dtype).reshape(pshape)) * inv_std
    data = gam * xhat + bet

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(np.sum(g * xhat, axis=axes, dtype=acc)
                              .astype(gamma.dtype))
        if beta.requires_grad:
            beta._accumulate(np.sum(g, axis=axes, dtype=acc).astype(beta.dtype))
        if not x.requires_grad:
            return
        if training:
            sum_g = np.sum(g, axis=axes, keepdims=True, dtype=acc).astype(x.dtype)
            sum_gx = np.sum(g * xhat, axis=axes, keepdims=True,
                            dtype=acc).astype(x.dtype)
            dx = (gam * inv_std) * (g - sum_g / m - xhat * (sum_gx / m))
        else:
            dx = g * gam * inv_std
        x._accumulate(dx)

    return _make(data, (x, gamma, beta), backward)


def l2_normalize(x, axis=1, eps=0.0):
    """Scale rows to unit L2 norm; all-zero rows map to zero (no NaN) and
    receive zero gradient."""
    sq = np.sum(np.square(x.data, dtype=np.float64), axis=axis, keepdims=True)
    norm = np.sqrt(sq).astype(x.dtype)
    safe = np.where(norm > eps, norm, 1.0).astype(x.dtype)
    data = x.data / safe
    nonzero = (norm > eps).astype(x.dtype)
    data = data * nonzero

    def backward(g):
        if not x.requires_grad:
            return
        dot = np.sum(g * data, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        dx = (g - data * dot) / safe * nonzero
        x._accumulate(dx)

    return _make(data, (x,), backward)
