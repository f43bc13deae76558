"""Layer containers: parameter discovery, init statistics, stochastic depth."""

import numpy as np

from guideformer.gradcheck import check_param_gradients
from guideformer.nn import (Conv2d, DepthwiseConv2d, FeedForward, LayerNorm, Linear, Module,
                            drop_path, trunc_normal)
from guideformer.rng import named_rng
from guideformer.tensor import Tensor


def test_trunc_normal_bounds_and_moments():
    gen = np.random.default_rng(0)
    x = trunc_normal(gen, (200_000,), std=0.02, cut=2.0)
    assert np.all(np.abs(x) < 2.0 * 0.02)
    assert abs(x.mean()) < 5e-4
    # variance of a symmetric 2-sigma truncation is ~0.774 of the untruncated
    assert abs(x.std() / 0.02 - 0.8796) < 0.01


def test_trunc_normal_is_stream_deterministic():
    a = trunc_normal(named_rng(4, "w"), (32,))
    b = trunc_normal(named_rng(4, "w"), (32,))
    assert np.array_equal(a, b)


def test_named_parameters_walks_nested_structure():
    gen = np.random.default_rng(1)

    class Block(Module):
        def __init__(self):
            self.lin = Linear(4, 4, gen)
            self.norms = [LayerNorm(4), LayerNorm(4)]

    class Net(Module):
        def __init__(self):
            self.blocks = [Block(), Block()]
            self.head = Linear(4, 2, gen, bias=False)

    net = Net()
    names = set(net.named_parameters())
    assert "blocks.0.lin.weight" in names
    assert "blocks.1.norms.1.gamma" in names
    assert "head.weight" in names
    assert "head.bias" not in names  # bias=False leaves no parameter behind
    # 2 blocks * (4*4+4 + 2*(4+4)) + 4*2
    assert net.num_params() == 2 * (16 + 4 + 16) + 8


def test_linear_conv_shapes():
    gen = np.random.default_rng(2)
    x = Tensor(gen.standard_normal((2, 5, 6, 3)))
    assert Linear(3, 8, gen)(x).shape == (2, 5, 6, 8)
    assert Conv2d(7, 7, 3, 8, gen, stride=4, pad=3)(Tensor(gen.standard_normal((2, 64, 64, 3)))).shape == (2, 16, 16, 8)
    assert Conv2d(3, 3, 3, 8, gen, stride=2, pad=1)(x.reshape(2, 5, 6, 3)).shape == (2, 3, 3, 8)
    assert DepthwiseConv2d(3, 3, gen)(x).shape == (2, 5, 6, 3)


def test_feedforward_gradients_flow_to_all_parameters():
    gen = np.random.default_rng(3)
    ff = FeedForward(6, gen, ratio=2, depthwise=True)
    x = np.random.default_rng(4).standard_normal((2, 4, 4, 6))
    err = check_param_gradients(lambda: (ff(Tensor(x)) * Tensor(x)).sum(),
                                ff.named_parameters(), sample=8)
    assert err < 1e-4
    assert set(ff.named_parameters()) == {
        "fc1.weight", "fc1.bias", "dw.weight", "dw.bias", "fc2.weight", "fc2.bias",
    }


def test_feedforward_without_depthwise_is_pointwise():
    # a pure MLP must treat every token identically regardless of position
    gen = np.random.default_rng(5)
    ff = FeedForward(4, gen, ratio=2, depthwise=False)
    x = np.random.default_rng(6).standard_normal((1, 2, 2, 4))
    y = ff(Tensor(x)).data
    perm = x[:, ::-1, :, :]
    y_perm = ff(Tensor(perm)).data
    assert np.allclose(y[:, ::-1, :, :], y_perm, atol=1e-12)


def test_drop_path_eval_is_identity_and_training_rescales():
    x = Tensor(np.ones((64, 3)))
    assert drop_path(x, 0.5, None) is x
    assert drop_path(x, 0.0, np.random.default_rng(0)) is x
    out = drop_path(x, 0.5, np.random.default_rng(1)).data
    # each row is either all-zero or all-1/keep
    assert set(np.unique(out).tolist()) <= {0.0, 2.0}
    kept = (out[:, 0] != 0).mean()
    assert 0.2 < kept < 0.8
    # expectation preserved on a bigger draw
    big = drop_path(Tensor(np.ones((20000, 1))), 0.3, np.random.default_rng(2)).data
    assert abs(big.mean() - 1.0) < 0.02
