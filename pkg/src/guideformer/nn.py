"""Parameterized layers on top of the tensor engine.

A ``Module`` is a plain object whose Tensor attributes (and nested Modules /
lists of Modules) are discovered by ``named_parameters``. Construction order
fixes parameter naming and is therefore part of the checkpoint contract.

Projection weights (every ``Linear``, and convolutions acting as token
projections) are drawn from a truncated normal (std 0.02, cut at two
standard deviations, inverse-CDF sampling so one stream draw per element).
Feature-extracting convolutions use fan-out He initialization
(normal with std sqrt(2 / (k*k*c_out)), per output-channel fan), without
which the embedding/downsampling highway starts too close to zero to train
at desk scale. Biases and norm offsets start at zero, norm gains at one.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special

from . import tensor as T
from .tensor import Tensor


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02, cut: float = 2.0) -> np.ndarray:
    """Normal(0, std) conditioned on |x| < cut·std, via inverse-CDF sampling."""
    lo = _special.ndtr(-cut)
    hi = _special.ndtr(cut)
    u = gen.uniform(lo, hi, size=shape)
    _special.ndtri(u, out=u)
    u *= std
    return u


def _walk_params(prefix: str, val, out: dict[str, Tensor]):
    if isinstance(val, Tensor):
        if val.requires_grad:
            out[prefix] = val
    elif isinstance(val, Module):
        for name, sub in vars(val).items():
            _walk_params(f"{prefix}.{name}" if prefix else name, sub, out)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            _walk_params(f"{prefix}.{i}" if prefix else str(i), item, out)


class Module:
    """Base for parameter containers; supports recursive named discovery.

    Trainable Tensors are found on attributes, nested Modules, and
    arbitrarily nested lists/tuples of either; names join the attribute
    path with dots. Construction order fixes the naming.
    """

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        _walk_params("", self, out)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x @ weight (+ bias); weight [d_in, d_out]."""

    def __init__(self, d_in: int, d_out: int, gen: np.random.Generator, bias: bool = True):
        self.weight = Tensor(trunc_normal(gen, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    """Learnable per-channel normalization over the last axis."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Conv2d(Module):
    """Cross-correlation over [..., h, w, cin] with kernel [kh, kw, cin, cout].

    ``init="conv"`` (default) draws fan-out He weights for feature
    extraction; ``init="proj"`` draws the projection-style truncated normal
    (used where a convolution merges tokens rather than extracts features).
    """

    def __init__(self, kh: int, kw: int, cin: int, cout: int, gen: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = True, init: str = "conv"):
        if init == "conv":
            w = gen.normal(0.0, np.sqrt(2.0 / (kh * kw * cout)), size=(kh, kw, cin, cout))
        elif init == "proj":
            w = trunc_normal(gen, (kh, kw, cin, cout))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class DepthwiseConv2d(Module):
    """Per-channel k×k same-padding convolution over [..., h, w, c].

    Fan-out He init with per-channel groups (fan = k*k).
    """

    def __init__(self, k: int, channels: int, gen: np.random.Generator):
        w = gen.normal(0.0, np.sqrt(2.0 / (k * k)), size=(k, k, channels))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias)


class FeedForward(Module):
    """Two-layer token MLP with GELU, optionally locally enhanced.

    With ``depthwise=True`` a 3×3 per-channel convolution over the token grid
    sits between the two linear layers (each followed by GELU), adding local
    detail to the otherwise pointwise expansion. Input is [..., h, w, c].
    """

    def __init__(self, dim: int, gen: np.random.Generator, ratio: int = 4, depthwise: bool = True):
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, gen)
        self.dw = DepthwiseConv2d(3, hidden, gen) if depthwise else None
        self.fc2 = Linear(hidden, dim, gen)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(self.fc1(x))
        if self.dw is not None:
            h = T.gelu(self.dw(h))
        return self.fc2(h)


def drop_path(x: Tensor, rate: float, gen: np.random.Generator | None) -> Tensor:
    """Stochastic depth over the leading (batch) axis.

    Training mode (``gen`` given): each sample's residual branch is zeroed
    with probability ``rate`` and survivors are rescaled by 1/keep.
    Evaluation (``gen`` None) or rate 0: identity.
    """
    if gen is None or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (gen.random(x.shape[0]) < keep).astype(x.data.dtype) / keep
    mask = mask.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return x * Tensor(mask)
