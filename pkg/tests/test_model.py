"""Backbone assembly: registry, shapes, audit equality, and block identities."""

import numpy as np
import pytest

from guideformer.errors import ConfigurationError, ContractError, DimensionError
from guideformer.gradcheck import check_param_gradients
from guideformer.model import (Model, ModelConfig, StageConfig, VARIANTS, build_variant,
                               count_flops, count_params)
from guideformer.tensor import Tensor, mac_counter


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny(**overrides):
    overrides.setdefault("drop_path", 0.0)
    return Model(build_variant("Tiny", **overrides), seed=0, dtype=np.float32)


# -- registry -------------------------------------------------------------------


def test_registry_has_all_variants():
    assert set(VARIANTS) == {"S", "M", "B", "Tiny"}


def test_small_variant_table_row():
    cfg = build_variant("S")
    assert cfg.input_size == 224
    assert [st.dim for st in cfg.stages] == [64, 128, 256, 512]
    assert cfg.stages[0].heads == 2 and cfg.stages[0].depth == 2
    assert cfg.stages[0].scales == (1, 8)
    assert cfg.stages[0].rates == (196, 56, 56, 28)
    assert cfg.grid(0) == 56 and cfg.grid(3) == 7


def test_base_variant_has_four_scales_in_stage_one():
    cfg = build_variant("B")
    assert cfg.stages[0].scales == (1, 2, 4, 8)
    assert cfg.stages[0].heads == 4
    assert cfg.stages[1].scales == (1, 2, 4)


def test_tiny_variant_validates_and_is_small():
    cfg = build_variant("Tiny")
    assert cfg.input_size == 64
    assert cfg.grid(0) == 16 and cfg.grid(3) == 2
    assert count_params(Model(cfg, seed=0)) < 1_000_000


def test_unknown_variant_rejected():
    with pytest.raises(ConfigurationError):
        build_variant("XL")


def test_variant_overrides_apply():
    cfg = build_variant("Tiny", num_classes=7, guidance="uniform", drop_path=0.0)
    assert cfg.num_classes == 7 and cfg.guidance == "uniform"


# -- config validation ----------------------------------------------------------


def _stage(dim=16, heads=2, depth=2, scales=(1, 2), rates=(8, 4, 4, 2), window=2):
    return StageConfig(dim=dim, heads=heads, depth=depth, scales=scales,
                       rates=rates, window=window)


def test_config_rejects_structural_mistakes():
    base = build_variant("Tiny")
    with pytest.raises(ConfigurationError):
        ModelConfig(name="x", input_size=48, stages=base.stages).validate()
    with pytest.raises(ConfigurationError):  # odd paired-stage depth
        ModelConfig(name="x", input_size=64,
                    stages=(_stage(depth=3),) + base.stages[1:]).validate()
    with pytest.raises(ConfigurationError):  # final stage must be vanilla
        ModelConfig(name="x", input_size=64,
                    stages=base.stages[:3] + (_stage(dim=128, heads=8, depth=1),)).validate()
    with pytest.raises(ConfigurationError):  # heads not divisible by head groups
        ModelConfig(name="x", input_size=64,
                    stages=(_stage(heads=3),) + base.stages[1:]).validate()
    with pytest.raises(ConfigurationError):
        build_variant("Tiny", guidance="psychic")
    with pytest.raises(ConfigurationError):
        build_variant("Tiny", drop_path=1.0)


def test_scale_mode_rewrites_geometry():
    cfg = build_variant("Tiny", scale_mode="local")
    assert all(s.scale == 1 for s in cfg.stage_specs(0))
    cfg = build_variant("Tiny", scale_mode="global")
    g = cfg.grid(0)
    assert all(s.is_global(g, g) for s in cfg.stage_specs(0))
    hybrid = build_variant("Tiny")
    assert [s.scale for s in hybrid.stage_specs(0)] == [1, 2]


# -- forward --------------------------------------------------------------------


def test_forward_shapes_and_stage_maps():
    model = tiny()
    x = rng(1).random((2, 64, 64, 3)).astype(np.float32)
    logits, maps = model(Tensor(x))
    assert logits.shape == (2, 10)
    assert [m.shape for m in maps] == [(2, 16, 16), (2, 8, 8), (2, 4, 4)]
    for m, heads in zip(maps, [2, 2, 4]):
        assert m.min() >= 0.0
        # full map = sum of per-head maps, each of mass ~1
        assert np.allclose(m.sum(axis=(1, 2)), heads, atol=1e-4 * heads)


def test_forward_accepts_plain_arrays():
    model = tiny()
    logits, _ = model(rng(2).random((1, 64, 64, 3)).astype(np.float32))
    assert logits.shape == (1, 10)


def test_forward_rejects_wrong_geometry():
    model = tiny()
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros((1, 32, 32, 3), np.float32)))


def test_same_seed_builds_bitwise_identical_models():
    a = tiny()
    b = tiny()
    for (ka, pa), (kb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert ka == kb and np.array_equal(pa.data, pb.data)
    x = rng(3).random((1, 64, 64, 3)).astype(np.float32)
    la, _ = a(Tensor(x))
    lb, _ = b(Tensor(x))
    assert np.array_equal(la.data, lb.data)


def test_different_seeds_build_different_models():
    a = Model(build_variant("Tiny"), seed=0, dtype=np.float32)
    b = Model(build_variant("Tiny"), seed=1, dtype=np.float32)
    assert not np.array_equal(a.patch_conv.weight.data, b.patch_conv.weight.data)


def test_cast_converts_all_parameters():
    model = Model(build_variant("Tiny"), seed=0)  # f64 default
    assert all(p.dtype == np.float64 for p in model.parameters())
    model.cast(np.float32)
    assert all(p.dtype == np.float32 for p in model.parameters())


def test_drop_rates_are_a_linear_ramp():
    model = tiny(drop_path=0.12)
    rates = model.block_drop_rates()
    assert len(rates) == 7  # 2 + 2 + 2 + 1 blocks
    assert rates[0] == 0.0 and rates[-1] == pytest.approx(0.12)
    diffs = np.diff(rates)
    assert np.allclose(diffs, diffs[0])


def test_eval_forward_is_deterministic_and_dropout_free():
    model = tiny(drop_path=0.5)
    x = rng(4).random((1, 64, 64, 3)).astype(np.float32)
    la, _ = model(Tensor(x))       # gen=None: evaluation mode
    lb, _ = model(Tensor(x))
    assert np.array_equal(la.data, lb.data)


def test_guidance_source_changes_forward():
    x = rng(5).random((1, 64, 64, 3)).astype(np.float32)
    out = {}
    for guidance in ["hybrid", "uniform"]:
        model = tiny(guidance=guidance)
        out[guidance], _ = model(Tensor(x))
    assert not np.array_equal(out["hybrid"].data, out["uniform"].data)


# -- residual identities ---------------------------------------------------------


def test_zeroed_branch_outputs_make_blocks_identity():
    from guideformer.model import HybridBlock, VanillaBlock
    from guideformer.rng import named_rng
    from guideformer.attention import AttentionGroupSpec

    specs = [AttentionGroupSpec(scale=1, heads=2, window=2, head_dim=8)]
    blk = HybridBlock(16, specs, named_rng(0, "t"), ratio=4, depthwise=True)
    blk.attn.out_proj.weight.data[:] = 0.0
    blk.attn.out_proj.bias.data[:] = 0.0
    blk.mlp.fc2.weight.data[:] = 0.0
    blk.mlp.fc2.bias.data[:] = 0.0
    x = Tensor(rng(6).standard_normal((2, 4, 4, 16)))
    y, _ = blk(x)
    assert np.array_equal(y.data, x.data)

    vb = VanillaBlock(16, 2, named_rng(0, "v"), ratio=4, depthwise=False)
    vb.attn.out_proj.weight.data[:] = 0.0
    vb.attn.out_proj.bias.data[:] = 0.0
    vb.mlp.fc2.weight.data[:] = 0.0
    vb.mlp.fc2.bias.data[:] = 0.0
    y = vb(x)
    assert np.array_equal(y.data, x.data)


def test_guided_block_requires_guidance():
    from guideformer.model import GuidedBlock
    from guideformer.reallocation import ReallocationPlan
    from guideformer.rng import named_rng

    blk = GuidedBlock(16, 2, ReallocationPlan(rates=(2, 1)), named_rng(0, "g"),
                      ratio=4, depthwise=False)
    with pytest.raises(ContractError):
        blk(Tensor(np.zeros((1, 4, 4, 16))), None)


def test_block_pair_gradcheck_at_coarse_stage_geometry():
    # stage-3 geometry of the desk variant: 4x4 grid, scales (1, 2), rates (2, 1)
    from guideformer.model import GuidedBlock, HybridBlock
    from guideformer.attention import AttentionGroupSpec
    from guideformer.reallocation import ReallocationPlan
    from guideformer.rng import named_rng

    dim = 8
    specs = [AttentionGroupSpec(scale=1, heads=1, window=2, head_dim=4),
             AttentionGroupSpec(scale=2, heads=1, window=2, head_dim=4)]
    hyb = HybridBlock(dim, specs, named_rng(1, "h"), ratio=2, depthwise=True)
    gui = GuidedBlock(dim, 2, ReallocationPlan(rates=(2, 1)), named_rng(1, "g"),
                      ratio=2, depthwise=True)
    x = Tensor(rng(7).standard_normal((1, 4, 4, dim)), requires_grad=True)
    wt = Tensor(rng(8).standard_normal((1, 4, 4, dim)))

    def loss():
        y, maps = hyb(x)
        return (gui(y, maps.sum(axis=-3)) * wt).sum()

    params = {**{f"h.{k}": v for k, v in hyb.named_parameters().items()},
              **{f"g.{k}": v for k, v in gui.named_parameters().items()},
              "x": x}
    # The pair couples through a piecewise-constant token ranking, so finite
    # differences near a reorder boundary are noisy; the composed check gets
    # the end-to-end tolerance while each block alone is held to 1e-4.
    err = check_param_gradients(loss, params, sample=4, seed=5, eps=1e-4)
    assert err < 1e-3


# -- cost audit ------------------------------------------------------------------


def test_param_count_is_config_pure():
    a = Model(build_variant("Tiny"), seed=0)
    b = Model(build_variant("Tiny"), seed=99)
    assert count_params(a) == count_params(b) == sum(p.size for p in a.parameters())


def test_analytic_flops_match_instrumented_macs_exactly():
    model = tiny()
    x = rng(9).random((1, 64, 64, 3)).astype(np.float32)
    with mac_counter() as mc:
        model(Tensor(x))
    assert mc.total == count_flops(model)


def test_flops_scale_with_input_size():
    # The desk variant's reallocation rates divide every grid down to 64 px;
    # the published variants only fit their native 224 geometry.
    cfg = build_variant("Tiny")
    at128 = count_flops(cfg, input_size=128)
    at64 = count_flops(cfg, input_size=64)
    assert at64 < at128
    with pytest.raises(ConfigurationError):
        count_flops(cfg, input_size=100)


def test_published_scale_audit_bands():
    # params within 15% and MACs within 20% of the published figures
    published = {"S": (22.5e6, 4.8e9), "M": (38.7e6, 7.5e9), "B": (77.9e6, 15.6e9)}
    for name, (p_target, f_target) in published.items():
        cfg = build_variant(name)
        params = count_params(Model(cfg, seed=0))
        flops = count_flops(cfg)
        assert abs(params - p_target) / p_target < 0.15, (name, params)
        assert abs(flops - f_target) / f_target < 0.20, (name, flops)
