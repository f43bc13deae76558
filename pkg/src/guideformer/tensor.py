"""Dense N-d tensors with taped reverse-mode automatic differentiation.

Everything is backed by numpy arrays in a channel-last layout
([batch, height, width, channel]) so that window partitioning and token
merging reduce to reshapes. Float64 is the default dtype (finite-difference
oracles are unreliable in single precision); float32 is selectable for
training speed.

The tape is implicit: every op records its parents and a VJP closure on the
output tensor. ``backward`` walks the recorded graph once in reverse
topological order, accumulates gradients additively into every
``requires_grad`` leaf, and then discards the tape.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as _special

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (pure inference, ~2x faster)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of the ops run while active."""

    def __init__(self):
        self.total = 0


_mac_counter: MacCounter | None = None


@contextlib.contextmanager
def mac_counter():
    """Count MACs of matmul/conv/aggregation ops executed in the block."""
    global _mac_counter
    prev = _mac_counter
    counter = MacCounter()
    _mac_counter = counter
    try:
        yield counter
    finally:
        _mac_counter = prev


def _add_macs(n: int):
    if _mac_counter is not None:
        _mac_counter.total += int(n)


class Tensor:
    """A dense real array plus optional gradient buffer and tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a recorded op; multiply by a reciprocal instead")
        return mul(self, _as_tensor(1.0 / other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, taping it when gradients are enabled and needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse-mode accumulation from a scalar loss over the recorded tape.

    Gradients add up across multiple uses of the same tensor. Leaves keep
    their ``grad``; intermediate adjoints and the tape itself are freed.
    """
    if loss.size != 1:
        raise ContractError(f"backward seed must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        vjp, parents = node._vjp, node._parents
        if vjp is None:
            continue
        grads = vjp(node.grad)
        for parent, g in zip(parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        # discard the tape and the intermediate adjoint
        node._parents = ()
        node._vjp = None
        node.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# -- elementwise / structural ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(a.data[index].copy(), (a,), vjp)


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select token rows: x [t, c] with idx [k], or x [b, t, c] with idx [b, k].

    ``idx`` is a constant (no gradient flows into the index source); the
    gradient scatter-adds back into the selected rows.
    """
    idx = np.asarray(idx)
    if x.ndim == 2 and idx.ndim == 1:
        out = x.data[idx]

        def vjp(g):
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            return (dx,)

    elif x.ndim == 3 and idx.ndim == 2:
        out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
        b, _, c = x.shape
        bi = np.arange(b)[:, None, None]
        ci = np.arange(c)[None, None, :]

        def vjp(g):
            dx = np.zeros_like(x.data)
            np.add.at(dx, (bi, idx[:, :, None], ci), g)
            return (dx,)

    else:
        raise DimensionError(f"gather_tokens: unsupported shapes x{x.shape}, idx{idx.shape}")
    return _record(out, (x,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else math.prod(
        a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))
    )
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), vjp)


# -- matrix / neural primitives ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product a[..., m, k] @ b[..., k, n] -> [..., m, n].

    The common projection case (stacked rows times a plain matrix) is folded
    into a single GEMM instead of one small GEMM per leading slice.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree: {a.shape} @ {b.shape}")
    kdim, ndim = b.shape[-2], b.shape[-1]
    if b.ndim == 2 and a.ndim > 2:
        a2 = np.ascontiguousarray(a.data).reshape(-1, kdim)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (ndim,))
        _add_macs(a2.shape[0] * kdim * ndim)

        def vjp(g):
            g2 = g.reshape(-1, ndim)
            da = (g2 @ b.data.T).reshape(a.shape)
            db = a2.T @ g2
            return da, db

        return _record(out, (a, b), vjp)
    out = np.matmul(a.data, b.data)
    _add_macs(out.size // out.shape[-1] * a.shape[-1] * out.shape[-1])

    def vjp(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _record(out, (a, b), vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis; rows sum to 1."""
    out = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def vjp(g):
        dx = g - (g * out).sum(axis=-1, keepdims=True)
        dx *= out
        return (dx,)

    return _record(out, (x,), vjp)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    """log(softmax(x)) over the last axis via a stable log-sum-exp."""
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-slice normalization over the last axis (biased variance) + affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    c = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...c,...c->...", xhat, xhat)[..., None] / c
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        gx = g * gamma.data
        dot = np.einsum("...c,...c->...", gx, xhat)[..., None] / c
        gx -= gx.mean(axis=-1, keepdims=True)
        gx -= xhat * dot
        gx *= inv
        return gx, dgamma, dbeta

    return _record(out, (x, gamma, beta), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x) (erf, not the tanh approximation)."""
    xd = x.data
    cdf = _special.erf(xd * xd.dtype.type(1.0 / math.sqrt(2.0)))
    cdf += 1.0
    cdf *= 0.5
    out = xd * cdf

    def vjp(g):
        pdf = xd * xd
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= xd.dtype.type(1.0 / math.sqrt(2.0 * math.pi))
        pdf *= xd
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _record(out, (x,), vjp)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[1] = (pad, pad)
    width[2] = (pad, pad)
    return np.pad(x, width)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation: x [..., h, w, cin], w [kh, kw, cin, cout] -> [..., h', w', cout].

    Zero padding; h' = (h + 2 pad - kh) // stride + 1. Implemented as
    im2col + GEMM.
    """
    kh, kw, cin, cout = w.shape
    *lead, h, ww, cx = x.shape
    if cx != cin:
        raise DimensionError(f"conv2d: input channels {cx} != kernel channels {cin}")
    if h + 2 * pad < kh or ww + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{ww + 2 * pad}"
        )
    n = math.prod(lead) if lead else 1
    xb = x.data.reshape(n, h, ww, cin)
    xp = _pad_hw(xb, pad)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [n, ho, wo, cin, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out2 = cols @ wmat
    _add_macs(out2.size * kh * kw * cin)
    if bias is not None:
        out2 = out2 + bias.data
    out = out2.reshape(*lead, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        dw = (cols.T @ g2).reshape(w.shape)
        db = None if bias is None else g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + (ho - 1) * stride + 1 : stride,
                    j : j + (wo - 1) * stride + 1 : stride] += dcols[:, :, :, i, j]
        dx = dxp if pad == 0 else dxp[:, pad : pad + h, pad : pad + ww]
        dx = dx.reshape(x.shape)
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out, parents, vjp)


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None) -> Tensor:
    """Per-channel k x k convolution, stride 1, 'same' padding.

    x [..., h, w, c], w [k, k, c]. Implemented as k*k shifted
    multiply-accumulates (no im2col needed for small kernels).
    """
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise DimensionError(f"depthwise kernel must be odd square, got {w.shape}")
    *lead, h, ww, c = x.shape
    if w.shape[2] != c:
        raise DimensionError(f"depthwise: channels {c} != kernel channels {w.shape[2]}")
    pad = k // 2
    n = math.prod(lead) if lead else 1
    xb = x.data.reshape(n, h, ww, c)
    xp = _pad_hw(xb, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    out = np.einsum("nhwcij,ijc->nhwc", win, w.data, optimize=True)
    _add_macs(n * h * ww * c * k * k)
    if bias is not None:
        out += bias.data

    def vjp(g):
        gb = np.ascontiguousarray(g.reshape(n, h, ww, c))
        dw = np.einsum("nhwcij,nhwc->ijc", win, gb, optimize=True)
        # dL/dx is the correlation of the incoming gradient with the
        # spatially flipped kernel (same stride-1 / same-padding geometry).
        gp = _pad_hw(gb, pad)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(1, 2))
        dx = np.einsum("nhwcij,ijc->nhwc", gwin, w.data[::-1, ::-1], optimize=True)
        dx = dx.reshape(x.shape)
        db = None if bias is None else gb.sum(axis=(0, 1, 2))
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out.reshape(x.shape), parents, vjp)


def weighted_chunk_sum(x: Tensor, r: int, w: Tensor, b: Tensor) -> Tensor:
    """Merge consecutive runs of r tokens into one via a shared length-r weighting.

    x [..., L, c] -> [..., L//r, c] with out[..., k, d] = sum_j w[j] * x[..., k*r+j, d] + b.
    The weight vector is shared across channels; the bias is a scalar.
    """
    *lead, length, c = x.shape
    if length % r != 0:
        raise DimensionError(f"weighted_chunk_sum: {length} tokens not divisible by rate {r}")
    if w.shape != (r,):
        raise DimensionError(f"weighted_chunk_sum: weight shape {w.shape} != ({r},)")
    xr = x.data.reshape(*lead, length // r, r, c)
    out = np.einsum("...krc,r->...kc", xr, w.data) + b.data
    _add_macs(out.size // c * r * c)

    def vjp(g):
        dx = (g[..., :, None, :] * w.data[:, None]).reshape(x.shape)
        dw = np.einsum("nc,nrc->r", g.reshape(-1, c), xr.reshape(-1, r, c))
        db = np.asarray(g.sum(), dtype=b.dtype).reshape(b.shape)
        return dx, dw, db

    return _record(out, (x, w, b), vjp)
