"""Significance-ranked token reallocation and self-guided attention.

Tokens are sorted by significance (ascending, ties by position), split into
n equal sub-regions, and every sub-region is compressed by its own
aggregation rate r: each run of r consecutive tokens becomes one token via a
learned length-r weighting. Salient regions get small rates (many surviving
tokens), background gets large rates (few). Queries keep full length; only
keys and values read the reallocated set, so attention cost drops while
salient detail survives.

Ranking is piecewise constant in the significance values, so sort indices
are constants under differentiation; gradients flow through the gathered
token values and the aggregation weights only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import multi_head_attention
from .errors import ConfigurationError, DimensionError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class ReallocationPlan:
    """Per-sub-region aggregation rates, least-significant region first.

    rates[0] compresses the least significant tokens (largest rate), the
    last entry the most salient (smallest rate); rates must be
    non-increasing. The number of sub-regions is len(rates).
    """

    rates: tuple[int, ...]

    @property
    def regions(self) -> int:
        return len(self.rates)

    def validate(self, tokens: int):
        if not self.rates:
            raise ConfigurationError("plan needs at least one rate")
        if any(r < 1 for r in self.rates):
            raise ConfigurationError(f"rates must be positive: {self.rates}")
        if list(self.rates) != sorted(self.rates, reverse=True):
            raise ConfigurationError(
                f"rates must not increase from least to most significant region: {self.rates}"
            )
        n = self.regions
        if tokens % n:
            raise ConfigurationError(f"{n} regions do not divide {tokens} tokens")
        group = tokens // n
        for r in self.rates:
            if group % r:
                raise ConfigurationError(f"rate {r} does not divide region size {group}")

    def output_counts(self, tokens: int) -> tuple[int, ...]:
        """Surviving K/V tokens per region, least significant first."""
        self.validate(tokens)
        group = tokens // self.regions
        return tuple(group // r for r in self.rates)

    def total_output(self, tokens: int) -> int:
        return sum(self.output_counts(tokens))


def rank_and_group(s_map: np.ndarray, n: int) -> list[np.ndarray]:
    """Split all positions into n equal groups of ascending significance.

    The map is flattened row-major and stable-argsorted (ties keep raster
    order), then cut into n runs; group n-1 holds the most salient
    positions. Indices are flat positions into the h·w token sequence.
    """
    flat = np.asarray(s_map).reshape(-1)
    if flat.size % n:
        raise ConfigurationError(f"{n} regions do not divide {flat.size} positions")
    order = np.argsort(flat, kind="stable")
    group = flat.size // n
    return [order[g * group : (g + 1) * group] for g in range(n)]


def aggregate_group(x: Tensor, r: int, weight: Tensor, bias: Tensor) -> Tensor:
    """Compress [..., L, c] to [..., L/r, c]: each run of r tokens becomes one.

    Output token k, channel d = sum_j weight[j] * x[..., k*r+j, d] + bias —
    the weighting is shared across channels and the bias is a scalar.
    """
    return T.weighted_chunk_sum(x, r, weight, bias)


class AggregationParams(Module):
    """One learned (length-r weight, scalar bias) pair per sub-region.

    Weights start at 1/r (plain averaging), biases at zero, so reallocated
    tokens initially match input-token statistics.
    """

    def __init__(self, rates: tuple[int, ...]):
        self.weights = [Tensor(np.full(r, 1.0 / r), requires_grad=True) for r in rates]
        self.biases = [Tensor(np.zeros(()), requires_grad=True) for _ in rates]


def iam(x: Tensor, s_map: np.ndarray, plan: ReallocationPlan, params: AggregationParams) -> Tensor:
    """Importance-guided aggregation: rank, split, compress, concatenate.

    x: [hw, c] or [b, hw, c]; s_map: matching [h, w] / [hw] (or with leading
    batch axis) — each batch element is ranked independently. Output token
    count is plan.total_output(hw) regardless of content, ordered least to
    most significant region.
    """
    tokens = x.shape[-2]
    plan.validate(tokens)
    flat = np.asarray(s_map).reshape(x.shape[:-2] + (tokens,))
    order = np.argsort(flat, axis=-1, kind="stable")
    group = tokens // plan.regions
    outs = []
    for g, rate in enumerate(plan.rates):
        idx = order[..., g * group : (g + 1) * group]
        gathered = T.gather_tokens(x, idx)
        outs.append(aggregate_group(gathered, rate, params.weights[g], params.biases[g]))
    return T.concat(outs, axis=-2)


class SelfGuidedAttention(Module):
    """Global attention whose K/V come from one shared IAM pass.

    Q is projected from the full token sequence; the aggregated sequence is
    computed once and projected separately into K and V. Multi-head scaled
    dot-product attention over the shortened keys, then an output projection.
    """

    def __init__(self, dim: int, heads: int, plan: ReallocationPlan, gen: np.random.Generator):
        if dim % heads:
            raise ConfigurationError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.plan = plan
        self.aggregation = AggregationParams(plan.rates)
        self.q_proj = Linear(dim, dim, gen, bias=False)
        self.k_proj = Linear(dim, dim, gen, bias=False)
        self.v_proj = Linear(dim, dim, gen, bias=False)
        self.out_proj = Linear(dim, dim, gen, bias=True)

    def __call__(self, x: Tensor, s_map: np.ndarray) -> Tensor:
        *lead, h, w, c = x.shape
        tokens = T.reshape(x, (*lead, h * w, c))
        kv = iam(tokens, s_map, self.plan, self.aggregation)
        out = multi_head_attention(
            self.q_proj(tokens), self.k_proj(kv), self.v_proj(kv), self.heads
        )
        return T.reshape(self.out_proj(out), x.shape)


GUIDANCE_SOURCES = ("hybrid", "local", "global", "uniform")


def make_guidance(head_maps: np.ndarray, specs, grid: tuple[int, int], source: str) -> np.ndarray:
    """Combine per-head maps [..., H, h, w] into the map that guides ranking.

    hybrid: sum over all heads. local: sum over scale-1 heads only. global:
    sum over heads whose query window spans the whole grid. uniform: constant
    map (every position equal), independent of the input. Total mass always
    equals the number of heads summed (uniform uses the full head count).
    """
    h, w = grid
    if head_maps.shape[-2:] != (h, w):
        raise DimensionError(f"maps {head_maps.shape} do not match grid {h}x{w}")
    flags = [(s.scale, s.is_global(h, w)) for s in specs for _ in range(s.heads)]
    if head_maps.shape[-3] != len(flags):
        raise DimensionError(f"{head_maps.shape[-3]} maps for {len(flags)} heads")
    if source == "uniform":
        lead = head_maps.shape[:-3]
        value = len(flags) / float(h * w)
        return np.full(lead + (h, w), value, dtype=head_maps.dtype)
    if source == "hybrid":
        return head_maps.sum(axis=-3)
    if source == "local":
        keep = [i for i, (scale, _) in enumerate(flags) if scale == 1]
    elif source == "global":
        keep = [i for i, (_, g) in enumerate(flags) if g]
    else:
        raise ConfigurationError(f"unknown guidance source {source!r}")
    if not keep:
        raise ConfigurationError(f"no {source} heads exist in this configuration")
    return head_maps[..., keep, :, :].sum(axis=-3)
