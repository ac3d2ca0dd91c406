"""Reverse-mode autodiff over float32 numpy arrays.

Small tape-based engine: every op returns a new Tensor holding the numpy
result plus a backward closure. Values are computed by the same numpy calls
whether or not a graph is recorded, so no-grad inference is bit-identical
to recorded forward passes.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DTYPE = np.float32

# Global matmul/conv FLOP counter (multiply-accumulates x2), used by the
# streaming-cost instrumentation. Reset/read via flop helpers below.
_FLOPS = 0

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision64():
    """Run enclosed ops at float64. Only the finite-difference oracle uses
    this; training and inference stay float32."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.float64
    try:
        yield
    finally:
        DTYPE = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def reset_flops() -> None:
    global _FLOPS
    _FLOPS = 0


def flops() -> int:
    return _FLOPS


def _count_flops(n: int) -> None:
    global _FLOPS
    _FLOPS += n


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    return a


class Tensor:
    """float32 array with optional gradient tracking.

    Invariants: data.size == prod(shape); grad, when present, has the same
    shape as data.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=DTYPE), requires_grad)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut from the graph. Absorbing: no gradient flows back."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitive ops ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = np.matmul(a.data, b.data)
    m = a.data.shape[-2] if a.data.ndim > 1 else 1
    k = a.data.shape[-1]
    n = b.data.shape[-1] if b.data.ndim > 1 else 1
    batch = max(data.size // max(m * n, 1), 1)
    _count_flops(2 * m * k * n * batch)

    def backward(g):
        if a.requires_grad:
            bt = np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else b.data
            ga = np.matmul(g, bt) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            at = np.swapaxes(a.data, -1, -2) if a.data.ndim > 1 else a.data
            if a.data.ndim > 1:
                gb = np.matmul(at, g)
            else:
                gb = np.multiply.outer(a.data, g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def tpow(a, p: float) -> Tensor:
    a = _wrap(a)
    data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (p * a.data ** (p - 1)))

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (0.5 / data))

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def _sigmoid_vals(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # exp overflow saturates to the correct 0
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    data = _sigmoid_vals(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def silu(a) -> Tensor:
    a = _wrap(a)
    s = _sigmoid_vals(a.data)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably."""
    a = _wrap(a)
    data = np.logaddexp(0.0, a.data).astype(DTYPE)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + np.exp(-a.data)))

    return _make(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(data, (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).astype(DTYPE))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape).astype(DTYPE))

    return _make(np.asarray(data, dtype=DTYPE), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=DTYPE)
            np.add.at(full, idx, g.reshape(full[idx].shape))
            a._accumulate(full)

    return _make(np.asarray(data), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
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


def stack(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask (no gradient through cond)."""
    a, b = _wrap(a), _wrap(b)
    data = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(data, (a, b), backward)


def softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; fused for speed and tape economy."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    n = a.data.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            t1 = gx.mean(axis=-1, keepdims=True)
            t2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - t1 - xhat * t2))

    return _make(data, (a, gain, bias), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into a [V, D] table by integer id array."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros(table.shape, dtype=DTYPE)
            np.add.at(full, ids, g)
            table._accumulate(full)

    return _make(data, (table,), backward)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """x [B,C,H,W] * w [O,C,kh,kw] (+ b [O]) -> [B,O,H',W'], im2col GEMM."""
    x, w = _wrap(x), _wrap(w)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, kh, kw, Ho, Wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    cols = np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(B * Ho * Wo, C * kh * kw)
    wf = w.data.reshape(O, -1).T
    out = cols @ wf
    _count_flops(2 * cols.shape[0] * cols.shape[1] * O)
    if b is not None:
        out = out + b.data
    data = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    data = np.ascontiguousarray(data)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if b is not None and b.requires_grad:
            b._accumulate(gf.sum(axis=0))
        if w.requires_grad:
            gw = cols.T @ gf
            w._accumulate(gw.T.reshape(O, C, kh, kw))
        if x.requires_grad:
            gcols = gf @ wf.T
            gcols = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
            x._accumulate(gx)

    return _make(data, parents, backward)


def upsample2x(x) -> Tensor:
    """Nearest-neighbor x2 upsampling of [B,C,H,W]."""
    x = _wrap(x)
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        if x.requires_grad:
            B, C, H2, W2 = g.shape
            gx = g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5))
            x._accumulate(gx)

    return _make(data, (x,), backward)


# -- backward driver --------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Every reachable tensor with requires_grad accumulates into .grad.
    Detached tensors block the sweep by construction (no parents).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    # release the graph; leaf grads stay, intermediate grads die with their nodes
    for node in topo:
        node._backward = None
        node._parents = ()


def grad_check(f, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central finite differences.

    f maps x to a scalar Tensor. Returns max_i |g_ad - g_fd| / max(1, |g_fd|).
    Both sides are evaluated at float64 so the comparison probes derivative
    structure rather than float32 rounding.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with precision64():
        x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
        out = f(x64)
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued f")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("non-finite output in grad_check")
        backward(out)
        g_ad = np.zeros(x.shape, dtype=np.float64) if x64.grad is None else x64.grad.astype(np.float64)

        flat = x64.data.reshape(-1)
        g_fd = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f(x64).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f(x64).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("non-finite output in grad_check")
            g_fd[i] = (fp - fm) / (2 * h)
    g_fd = g_fd.reshape(x.shape)
    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))
