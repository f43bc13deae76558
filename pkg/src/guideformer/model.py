"""Full classification backbone with a variant registry and cost audit.

Pipeline: 7x7 stride-4 convolutional patch embedding, then four stages on a
halving grid. Stages 1-3 alternate (hybrid-scale attention block, self-guided
attention block) pairs — the hybrid block's significance maps guide the next
block's token reallocation. Stage 4 runs vanilla global attention. A final
norm, mean pool over tokens, and linear classifier produce logits.

Every block is pre-norm residual with an optionally locally-enhanced MLP and
a linear stochastic-depth schedule across blocks. ``count_params`` /
``count_flops`` audit model cost; FLOPs are multiply-accumulates over convs,
projections, and attention products, cross-checkable against instrumented
execution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionGroupSpec, GlobalAttention, HybridScaleAttention
from .errors import ConfigurationError, ContractError, DimensionError
from .nn import Conv2d, FeedForward, LayerNorm, Linear, Module, drop_path
from .reallocation import (GUIDANCE_SOURCES, ReallocationPlan, SelfGuidedAttention,
                           make_guidance)
from .rng import named_rng
from .tensor import Tensor

SCALE_MODES = ("hybrid", "local", "global")


@dataclass(frozen=True)
class StageConfig:
    """One stage's width, heads, depth, and (for stages 1-3) geometry.

    ``scales`` lists one merge scale per head group; empty marks a vanilla
    global-attention stage. ``rates`` are the reallocation rates, least
    significant region first. ``window`` is the base K/V window size.
    """

    dim: int
    heads: int
    depth: int
    scales: tuple[int, ...] = ()
    rates: tuple[int, ...] = ()
    window: int = 7


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_size: int
    stages: tuple[StageConfig, ...]
    num_classes: int = 10
    mlp_ratio: int = 4
    drop_path: float = 0.1
    guidance: str = "hybrid"     # hybrid | local | global | uniform
    scale_mode: str = "hybrid"   # hybrid | local (all scales 1) | global (all windows span the grid)
    leff: bool = True            # depthwise conv inside the MLP

    def grid(self, stage: int) -> int:
        """Token-grid side length at ``stage`` (4x patch embed, then 2x steps)."""
        return self.input_size // (4 << stage)

    def stage_specs(self, stage: int) -> list[AttentionGroupSpec]:
        """Effective head-group geometry at ``stage`` under the scale mode."""
        st = self.stages[stage]
        g = self.grid(stage)
        if self.scale_mode == "local":
            scales = (1,) * len(st.scales)
        elif self.scale_mode == "global":
            if g % st.window:
                raise ConfigurationError(f"window {st.window} does not divide grid {g}")
            scales = (g // st.window,) * len(st.scales)
        else:
            scales = st.scales
        per_group = st.heads // len(scales)
        head_dim = st.dim // st.heads
        return [AttentionGroupSpec(s, per_group, st.window, head_dim) for s in scales]

    def stage_plan(self, stage: int) -> ReallocationPlan:
        return ReallocationPlan(self.stages[stage].rates)

    def validate(self):
        if len(self.stages) != 4:
            raise ConfigurationError(f"expected 4 stages, got {len(self.stages)}")
        if self.input_size % 32:
            raise ConfigurationError(f"input size {self.input_size} must be divisible by 32")
        if self.guidance not in GUIDANCE_SOURCES:
            raise ConfigurationError(f"unknown guidance source {self.guidance!r}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigurationError(f"unknown scale mode {self.scale_mode!r}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigurationError(f"drop-path rate {self.drop_path} outside [0, 1)")
        for i, st in enumerate(self.stages):
            if st.dim % st.heads:
                raise ConfigurationError(f"stage {i}: width {st.dim} not divisible by {st.heads} heads")
            if i == 3:
                if st.scales or st.rates:
                    raise ConfigurationError("the final stage is vanilla: no scales or rates")
                continue
            if not st.scales or not st.rates:
                raise ConfigurationError(f"stage {i} needs scales and rates")
            if st.depth % 2:
                raise ConfigurationError(f"stage {i} depth {st.depth} must be even (block pairs)")
            if st.heads % len(st.scales):
                raise ConfigurationError(
                    f"stage {i}: {st.heads} heads not divisible into {len(st.scales)} groups"
                )
            g = self.grid(i)
            specs = self.stage_specs(i)
            for spec in specs:
                spec.validate(g, g)
            self.stage_plan(i).validate(g * g)
            if self.guidance == "local" and not any(s.scale == 1 for s in specs):
                raise ConfigurationError(f"stage {i} has no scale-1 heads for local guidance")
            if self.guidance == "global" and not any(s.is_global(g, g) for s in specs):
                raise ConfigurationError(f"stage {i} has no global heads for global guidance")


_TABLE = {
    "S": dict(input_size=224, window=7,
              dims=(64, 128, 256, 512), heads=(2, 4, 8, 16), depths=(2, 4, 16, 1),
              scales=((1, 8), (1, 4), (1, 2)),
              rates=((196, 56, 56, 28), (49, 14, 14, 7), (2, 1))),
    "M": dict(input_size=224, window=7,
              dims=(64, 128, 256, 512), heads=(2, 4, 8, 16), depths=(2, 6, 28, 2),
              scales=((1, 8), (1, 4), (1, 2)),
              rates=((196, 56, 56, 28), (49, 14, 14, 7), (2, 1))),
    "B": dict(input_size=224, window=7,
              dims=(96, 192, 384, 768), heads=(4, 6, 12, 24), depths=(4, 6, 24, 2),
              scales=((1, 2, 4, 8), (1, 2, 4), (1, 2)),
              rates=((196, 56, 56, 28), (49, 14, 14, 7), (2, 1))),
    "Tiny": dict(input_size=64, window=2,
                 dims=(16, 32, 64, 128), heads=(2, 2, 4, 8), depths=(2, 2, 2, 1),
                 scales=((1, 2), (1, 2), (1, 2)),
                 rates=((16, 8, 8, 4), (8, 4, 4, 2), (2, 1))),
}

VARIANTS = tuple(_TABLE)


def build_variant(name: str, num_classes: int = 10, **overrides) -> ModelConfig:
    """Config for a registered variant; keyword overrides adjust the knobs.

    S/M/B are the published 224x224 configurations; Tiny is a 64x64
    desk-scale configuration with the same structure (two head groups per
    stage, window 2, reallocation to 36/18/12 K/V tokens at stages 1/2/3).
    """
    if name not in _TABLE:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {VARIANTS}")
    row = _TABLE[name]
    stages = tuple(
        StageConfig(dim=row["dims"][i], heads=row["heads"][i], depth=row["depths"][i],
                    scales=row["scales"][i] if i < 3 else (),
                    rates=row["rates"][i] if i < 3 else (),
                    window=row["window"])
        for i in range(4)
    )
    cfg = ModelConfig(name=name, input_size=row["input_size"], stages=stages,
                      num_classes=num_classes, **overrides)
    cfg.validate()
    return cfg


class HybridBlock(Module):
    """Pre-norm residual pair: hybrid-scale attention, then the MLP.

    Returns (x, per-head significance maps) — the maps feed the stage's next
    self-guided block.
    """

    def __init__(self, dim: int, specs, gen, ratio: int, depthwise: bool):
        self.norm1 = LayerNorm(dim)
        self.attn = HybridScaleAttention(dim, specs, gen)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, gen, ratio, depthwise)

    def __call__(self, x: Tensor, rate: float = 0.0, gen=None):
        attn_out, maps = self.attn(self.norm1(x))
        x = x + drop_path(attn_out, rate, gen)
        x = x + drop_path(self.mlp(self.norm2(x)), rate, gen)
        return x, maps


class GuidedBlock(Module):
    """Pre-norm residual pair around self-guided attention."""

    def __init__(self, dim: int, heads: int, plan: ReallocationPlan, gen, ratio: int, depthwise: bool):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfGuidedAttention(dim, heads, plan, gen)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, gen, ratio, depthwise)

    def __call__(self, x: Tensor, guidance: np.ndarray, rate: float = 0.0, gen=None):
        if guidance is None:
            raise ContractError("self-guided block needs the preceding block's significance map")
        x = x + drop_path(self.attn(self.norm1(x), guidance), rate, gen)
        x = x + drop_path(self.mlp(self.norm2(x)), rate, gen)
        return x


class VanillaBlock(Module):
    """Pre-norm residual pair around plain global attention (final stage)."""

    def __init__(self, dim: int, heads: int, gen, ratio: int, depthwise: bool):
        self.norm1 = LayerNorm(dim)
        self.attn = GlobalAttention(dim, heads, gen)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, gen, ratio, depthwise)

    def __call__(self, x: Tensor, rate: float = 0.0, gen=None):
        x = x + drop_path(self.attn(self.norm1(x)), rate, gen)
        x = x + drop_path(self.mlp(self.norm2(x)), rate, gen)
        return x


class Model(Module):
    """The assembled backbone. Parameter init is keyed per block by (seed, path)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        config.validate()
        self.config = config
        dims = [st.dim for st in config.stages]
        self.patch_conv = Conv2d(7, 7, 3, dims[0], named_rng(seed, "init.patch"), stride=4, pad=3)
        self.patch_norm = LayerNorm(dims[0])
        self.downsamples = [
            Conv2d(3, 3, dims[i - 1], dims[i], named_rng(seed, f"init.down{i}"), stride=2, pad=1)
            for i in range(1, 4)
        ]
        self.down_norms = [LayerNorm(dims[i]) for i in range(1, 4)]
        self.stages = []
        for i, st in enumerate(config.stages):
            blocks = []
            if i < 3:
                specs = config.stage_specs(i)
                plan = config.stage_plan(i)
                for p in range(st.depth // 2):
                    blocks.append(HybridBlock(
                        st.dim, specs, named_rng(seed, f"init.stage{i}.block{2 * p}"),
                        config.mlp_ratio, config.leff))
                    blocks.append(GuidedBlock(
                        st.dim, st.heads, plan, named_rng(seed, f"init.stage{i}.block{2 * p + 1}"),
                        config.mlp_ratio, config.leff))
            else:
                for b in range(st.depth):
                    blocks.append(VanillaBlock(
                        st.dim, st.heads, named_rng(seed, f"init.stage{i}.block{b}"),
                        config.mlp_ratio, config.leff))
            self.stages.append(blocks)
        self.final_norm = LayerNorm(dims[3])
        self.head = Linear(dims[3], config.num_classes, named_rng(seed, "init.head"))
        if np.dtype(dtype) != np.float64:
            self.cast(dtype)

    def cast(self, dtype):
        """Convert every parameter in place (gradients are dropped)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None

    def block_drop_rates(self) -> list[float]:
        """Linear stochastic-depth schedule, 0 at the first block to the max at the last."""
        total = sum(st.depth for st in self.config.stages)
        return [float(r) for r in np.linspace(0.0, self.config.drop_path, total)]

    def __call__(self, imgs: Tensor, gen: np.random.Generator | None = None):
        """imgs [b, H, W, 3] -> (logits [b, classes], per-stage significance maps).

        ``gen`` enables training-mode stochastic depth; None means
        evaluation (all residual branches kept). The returned maps are the
        last hybrid block's full (all heads summed) map per stage 1-3, each
        [b, h_i, w_i].
        """
        cfg = self.config
        if not isinstance(imgs, Tensor):
            imgs = Tensor(np.asarray(imgs))
        if imgs.shape[-3:] != (cfg.input_size, cfg.input_size, 3):
            raise DimensionError(
                f"expected {cfg.input_size}x{cfg.input_size}x3 images, got {imgs.shape}"
            )
        x = self.patch_norm(self.patch_conv(imgs))
        rates = self.block_drop_rates()
        bi = 0
        stage_maps = []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                x = self.down_norms[i - 1](self.downsamples[i - 1](x))
            if i < 3:
                specs = cfg.stage_specs(i)
                g = cfg.grid(i)
                last_full = None
                for j in range(0, len(blocks), 2):
                    x, head_maps = blocks[j](x, rates[bi], gen)
                    bi += 1
                    guidance = make_guidance(head_maps, specs, (g, g), cfg.guidance)
                    x = blocks[j + 1](x, guidance, rates[bi], gen)
                    bi += 1
                    last_full = head_maps.sum(axis=-3)
                stage_maps.append(last_full)
            else:
                for blk in blocks:
                    x = blk(x, rates[bi], gen)
                    bi += 1
        x = self.final_norm(x)
        pooled = T.tmean(x, axis=(x.ndim - 3, x.ndim - 2))
        return self.head(pooled), stage_maps


def count_params(model: Model) -> int:
    """Total trainable scalars."""
    return model.num_params()


def _mlp_macs(t: int, c: int, ratio: int, leff: bool) -> int:
    hidden = ratio * c
    macs = 2 * t * c * hidden
    if leff:
        macs += t * hidden * 9
    return macs


def count_flops(model, input_size: int | None = None) -> int:
    """Analytic multiply-accumulate count for one image.

    Counts convolutions, linear projections, attention score/value products,
    and aggregation sums — exactly the operations the instrumented counter
    in the tensor engine records, so the two are comparable one-to-one.
    Normalizations, activations, and softmax are excluded (standard
    convention for headline figures).
    """
    cfg = model.config if isinstance(model, Model) else model
    size = cfg.input_size if input_size is None else input_size
    if size % 32:
        raise ConfigurationError(f"input size {size} must be divisible by 32")
    g = size // 4
    total = g * g * cfg.stages[0].dim * (7 * 7 * 3)
    for i, st in enumerate(cfg.stages):
        if i > 0:
            g //= 2
            total += g * g * st.dim * (9 * cfg.stages[i - 1].dim)
        t = g * g
        c = st.dim
        if i < 3:
            specs = cfg.stage_specs(i)
            hybrid = 0
            for spec in specs:
                tm = t // (spec.scale * spec.scale)
                if spec.scale > 1:
                    hybrid += tm * (spec.scale * spec.scale * c) * c          # merge conv
                per_head = (t + 2 * tm) * c * spec.head_dim                   # q, k, v projections
                per_head += 2 * t * spec.window * spec.window * spec.head_dim # scores and values
                hybrid += spec.heads * per_head
            hybrid += t * c * c                                               # output projection
            hybrid += _mlp_macs(t, c, cfg.mlp_ratio, cfg.leff)
            kv = cfg.stage_plan(i).total_output(t)
            guided = 2 * t * c * c                                            # q and output projections
            guided += t * c                                                   # aggregation sums
            guided += 2 * kv * c * c                                          # k, v projections
            guided += 2 * t * kv * c                                          # scores and values
            guided += _mlp_macs(t, c, cfg.mlp_ratio, cfg.leff)
            total += (st.depth // 2) * (hybrid + guided)
        else:
            block = 4 * t * c * c + 2 * t * t * c + _mlp_macs(t, c, cfg.mlp_ratio, cfg.leff)
            total += st.depth * block
    total += cfg.stages[3].dim * cfg.num_classes
    return total
