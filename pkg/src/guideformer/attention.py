"""Hybrid-scale window attention and attention-derived significance maps.

One attention layer runs several head groups, each with its own merge scale
``s``: keys/values are downsampled s× (a learned stride-s convolution), their
windows stay at the base size M, and the query windows grow to s·M so that
every query window covers exactly one key window's receptive field. Small s
gives local fine-grained heads; s·M equal to the grid gives fully global
heads; one layer mixes both.

Each head also emits a significance map: how much attention mass every
spatial position received, accumulated over all queries and normalized so a
single head's map sums to one. Maps are plain numpy arrays — ranking
consumes them, and ranking is piecewise constant, so no gradient flows
through this path by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionGroupSpec:
    """Geometry of one head group: merge scale, head count, window, head width."""

    scale: int
    heads: int
    window: int
    head_dim: int

    def validate(self, h: int, w: int):
        if self.scale < 1 or self.heads < 1 or self.window < 1 or self.head_dim < 1:
            raise ConfigurationError(f"group fields must be positive: {self}")
        qm = self.scale * self.window
        if h % qm or w % qm:
            raise ConfigurationError(
                f"query window {qm} (scale {self.scale} x window {self.window}) "
                f"does not tile the {h}x{w} grid"
            )

    def is_global(self, h: int, w: int) -> bool:
        """True when the query window covers the whole grid."""
        return self.scale * self.window == h and self.scale * self.window == w


def window_partition(x: Tensor, m: int) -> Tensor:
    """[..., h, w, c] -> [..., (h/m)(w/m), m*m, c], windows and tokens in raster order."""
    *lead, h, w, c = x.shape
    if h % m or w % m:
        raise DimensionError(f"window size {m} does not divide grid {h}x{w}")
    k = len(lead)
    t = T.reshape(x, (*lead, h // m, m, w // m, m, c))
    t = T.transpose(t, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return T.reshape(t, (*lead, (h // m) * (w // m), m * m, c))


def window_reverse(wins: Tensor, m: int, h: int, w: int) -> Tensor:
    """Exact inverse of ``window_partition``: [..., nw, m*m, c] -> [..., h, w, c]."""
    *lead, nw, mm, c = wins.shape
    if nw != (h // m) * (w // m) or mm != m * m or h % m or w % m:
        raise DimensionError(f"cannot reassemble {nw} windows of {mm} tokens into {h}x{w}")
    k = len(lead)
    t = T.reshape(wins, (*lead, h // m, w // m, m, m, c))
    t = T.transpose(t, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return T.reshape(t, (*lead, h, w, c))


def merge_tokens(x: Tensor, s: int, kernel: Tensor | None, bias: Tensor | None) -> Tensor:
    """Merge every s x s tokens into one via a learned stride-s convolution.

    [..., h, w, c] -> [..., h/s, w/s, c]; s = 1 bypasses untouched (identity,
    no parameters involved).
    """
    if s == 1:
        return x
    *_, h, w, _ = x.shape
    if h % s or w % s:
        raise DimensionError(f"merge scale {s} does not divide grid {h}x{w}")
    return T.conv2d(x, kernel, bias, stride=s, pad=0)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return T.transpose(x, axes)


def scaled_window_attention(q: Tensor, k: Tensor, v: Tensor, scale: int, window: int):
    """Window attention between an h x w query grid and an s-times-merged key grid.

    q: [..., h, w, d]; k, v: [..., h/s, w/s, d]. Queries tile into (s·window)²
    windows, keys/values into window² windows; window counts then agree and
    window i of the queries attends within window i of the keys.

    Returns (out: [..., h, w, d], atten: [..., nw, (s·window)², window²])
    with softmax rows summing to one.
    """
    *_, h, w, d = q.shape
    *_, hk, wk, dk = k.shape
    if dk != d or v.shape != k.shape:
        raise DimensionError(f"q/k/v widths disagree: q{q.shape} k{k.shape} v{v.shape}")
    if (hk * scale, wk * scale) != (h, w):
        raise ConfigurationError(
            f"key grid {hk}x{wk} is not the query grid {h}x{w} merged by {scale}"
        )
    qm = scale * window
    if h % qm or w % qm:
        raise ConfigurationError(f"query window {qm} does not tile {h}x{w}")
    qw = window_partition(q, qm)
    kw = window_partition(k, window)
    vw = window_partition(v, window)
    if qw.shape[-3] != kw.shape[-3]:
        raise ConfigurationError(
            f"window counts disagree: {qw.shape[-3]} query vs {kw.shape[-3]} key windows"
        )
    scores = T.matmul(qw, _swap_last(kw)) * (1.0 / math.sqrt(d))
    atten = T.softmax_lastdim(scores)
    out = window_reverse(T.matmul(atten, vw), qm, h, w)
    return out, atten


def significance_accumulate(atten, scale: int, window: int, h: int, w: int) -> np.ndarray:
    """Fold one head's attention mass into a per-position score on the h x w grid.

    For every merged key position: sum its attention column over all queries
    in its window (queries elsewhere contribute nothing — those scores do not
    exist), divide by h·w, scatter onto the merged (h/s)x(w/s) grid, then
    nearest-neighbor upsample and divide by s² so the result lives on the
    full grid and sums to exactly the total softmax mass / (h·w) = 1.

    Input atten: [..., nw, (s·window)², window²] (Tensor or array); output is
    a detached numpy array [..., h, w] — downstream ranking is
    non-differentiable, so no tape is recorded.
    """
    a = atten.data if isinstance(atten, Tensor) else np.asarray(atten)
    col = a.sum(axis=-2) / float(h * w)  # [..., nw, window²]
    hm, wm = h // scale, w // scale
    lead = col.shape[:-2]
    k = len(lead)
    grid = col.reshape(*lead, hm // window, wm // window, window, window)
    grid = grid.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3))
    grid = grid.reshape(*lead, hm, wm)
    if scale == 1:
        return grid
    up = grid.repeat(scale, axis=-2).repeat(scale, axis=-1)
    return up / float(scale * scale)


class HybridScaleAttention(Module):
    """Multi-head attention with per-group K/V merging and per-head maps.

    Per head: independent [c, d_h] query/key/value projections (queries read
    the input grid, keys/values read the group's merged grid). One merge
    convolution per group with scale > 1, shared by that group's heads. Head
    outputs concatenate and pass through a joint output projection.

    ``__call__`` returns (y: same shape as x, maps: numpy [..., H, h, w]) —
    one significance map per head, each summing to 1 per image.
    """

    def __init__(self, dim: int, specs: list[AttentionGroupSpec], gen: np.random.Generator):
        total = sum(s.heads * s.head_dim for s in specs)
        self.specs = list(specs)
        self.q_projs = [Linear(dim, s.head_dim, gen, bias=False) for s in specs for _ in range(s.heads)]
        self.k_projs = [Linear(dim, s.head_dim, gen, bias=False) for s in specs for _ in range(s.heads)]
        self.v_projs = [Linear(dim, s.head_dim, gen, bias=False) for s in specs for _ in range(s.heads)]
        self.merges = [Conv2d(s.scale, s.scale, dim, dim, gen, stride=s.scale, init="proj")
                       if s.scale > 1 else None
                       for s in specs]
        self.out_proj = Linear(total, dim, gen, bias=True)

    def __call__(self, x: Tensor):
        *_, h, w, _ = x.shape
        outs, maps = [], []
        head = 0
        for gi, spec in enumerate(self.specs):
            spec.validate(h, w)
            merge = self.merges[gi]
            merged = x if merge is None else merge(x)
            for _ in range(spec.heads):
                q = self.q_projs[head](x)
                k = self.k_projs[head](merged)
                v = self.v_projs[head](merged)
                out, atten = scaled_window_attention(q, k, v, spec.scale, spec.window)
                outs.append(out)
                maps.append(significance_accumulate(atten, spec.scale, spec.window, h, w))
                head += 1
        y = self.out_proj(T.concat(outs, axis=-1))
        return y, np.stack(maps, axis=-3)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Plain global attention over token sequences.

    q: [..., Lq, c]; k, v: [..., Lk, c]; c divisible by heads. Softmax over
    all Lk keys per query with 1/sqrt(c/heads) scaling; heads concatenated
    back to [..., Lq, c] (no output projection here).
    """
    *lead, lq, c = q.shape
    if c % heads:
        raise ConfigurationError(f"width {c} not divisible by {heads} heads")
    d = c // heads
    lk = k.shape[-2]
    nb = len(lead)

    def split(t, length):
        t = T.reshape(t, (*lead, length, heads, d))
        return T.transpose(t, tuple(range(nb)) + (nb + 1, nb, nb + 2))

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = T.matmul(qh, _swap_last(kh)) * (1.0 / math.sqrt(d))
    out = T.matmul(T.softmax_lastdim(scores), vh)
    out = T.transpose(out, tuple(range(nb)) + (nb + 1, nb, nb + 2))
    return T.reshape(out, (*lead, lq, c))


class GlobalAttention(Module):
    """Vanilla multi-head self-attention block core (projections + MHA)."""

    def __init__(self, dim: int, heads: int, gen: np.random.Generator):
        if dim % heads:
            raise ConfigurationError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, gen, bias=False)
        self.k_proj = Linear(dim, dim, gen, bias=False)
        self.v_proj = Linear(dim, dim, gen, bias=False)
        self.out_proj = Linear(dim, dim, gen, bias=True)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, h, w, c = x.shape
        tokens = T.reshape(x, (*lead, h * w, c))
        out = multi_head_attention(
            self.q_proj(tokens), self.k_proj(tokens), self.v_proj(tokens), self.heads
        )
        return T.reshape(self.out_proj(out), x.shape)
