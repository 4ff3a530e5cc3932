import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resmlp import tensor as T
from resmlp.errors import ConfigurationError, DimensionError
from resmlp.training import cross_entropy
from resmlp.vision import (ModelConfig, VisionModel, block_forward, class_mlp_pool, count_flops,
                           count_params, cross_patch, default_layerscale, forward, patchify, preset)

from gradcheck import check_params
from helpers import random_images, randomize, tape_macs, tiny_config, with_values


# ---------------------------------------------------------------- counting

EXACT_PARAMS = {"S12": 15_350_872, "S24": 30_020_680, "B24": 115_736_776}


@pytest.mark.parametrize("name,paper", [("S12", 15.4e6), ("S24", 30.0e6), ("B24", 115.7e6)])
def test_param_counts_match_table(name, paper):
    n = count_params(preset(name))
    assert n == EXACT_PARAMS[name]
    assert abs(n - paper) / paper < 0.01


def test_class_mlp_param_count():
    n = count_params(preset("S12", pooling="class_mlp"))
    assert n == 17_719_396
    assert abs(n - 17.7e6) / 17.7e6 < 0.01


@pytest.mark.parametrize("name,paper", [("S12", 3.0e9), ("S24", 6.0e9), ("B24", 23.0e9),
                                        ("S12/14", 4.0e9), ("S12/8", 14.0e9)])
def test_mac_counts_match_table(name, paper):
    assert abs(count_flops(preset(name)) - paper) / paper < 0.02


def test_communication_ablation_counts():
    # linear -> none drops A and its affine; MLP with expansion 4 matches the 18.6M / 4.3G row
    assert abs(count_params(preset("S12", communication="none")) - 14.87e6) / 14.87e6 < 0.01
    mlp = preset("S12", communication="mlp", comm_expansion=4)
    assert abs(count_params(mlp) - 18.6e6) / 18.6e6 < 0.01
    assert abs(count_flops(mlp) - 4.3e9) / 4.3e9 < 0.02


VARIANTS = [
    {},
    {"communication": "none"},
    {"communication": "mlp", "comm_expansion": 2},
    {"pooling": "class_mlp"},
    {"pooling": "class_mlp", "class_layers": 1, "post_affine_bias": True},
    {"pre_norm": "layernorm", "positional_embedding": True},
    {"activation": "relu", "depth": 3},
]


@pytest.mark.parametrize("kw", VARIANTS)
def test_count_params_matches_built_model(kw):
    m = VisionModel.create(tiny_config(**kw))
    assert m.num_parameters() == count_params(m.config)


@pytest.mark.parametrize("kw", VARIANTS)
def test_count_flops_matches_executed_matmuls(kw):
    m = VisionModel.create(tiny_config(**kw))
    assert tape_macs(m, random_images(m.config, 1)) == count_flops(m.config)


# ---------------------------------------------------------------- construction

def test_layerscale_depth_rule():
    assert default_layerscale(12) == 0.1
    assert default_layerscale(18) == 0.1
    assert default_layerscale(24) == 1e-5
    assert default_layerscale(36) == 1e-6
    assert preset("S12").layerscale == 0.1
    assert preset("S12", layerscale_init=0.5).layerscale == 0.5
    m = VisionModel.create(tiny_config(depth=24, dim=4))
    assert np.all(m.blocks[0].post2.scale.data == 1e-5)


def test_config_errors():
    with pytest.raises(ConfigurationError):
        tiny_config(image_size=9)
    with pytest.raises(ConfigurationError):
        tiny_config(depth=0)
    with pytest.raises(ConfigurationError):
        tiny_config(pooling="max")
    with pytest.raises(ConfigurationError):
        preset("S99")
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"depht": 3})


def test_config_dict_round_trip():
    cfg = preset("S24", pooling="class_mlp", layerscale_init=0.3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_seeded():
    a, b = VisionModel.create(tiny_config(), seed=3), VisionModel.create(tiny_config(), seed=3)
    c = VisionModel.create(tiny_config(), seed=4)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.patch_embed.weight.data, c.patch_embed.weight.data)


def test_trunc_normal_init_bounds():
    w = VisionModel.create(tiny_config(dim=64)).blocks[0].fc1.weight.data
    assert np.abs(w).max() <= 0.04 + 1e-12
    assert abs(w.std() - 0.02) < 0.004


# ---------------------------------------------------------------- forward

def test_patchify_order():
    c, n, p = 2, 3, 2
    img = np.arange(c * n * p * n * p, dtype=np.float64).reshape(1, c, n * p, n * p)
    out = patchify(T.tensor(img), p).data[0]
    for i in range(n):
        for j in range(n):
            np.testing.assert_array_equal(out[i * n + j], img[0, :, i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(-1))


def test_patchify_rejects_bad_geometry():
    with pytest.raises(DimensionError):
        patchify(T.tensor(np.zeros((1, 3, 6, 6))), 4)


def _gelu(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def test_block_forward_scalar_oracle():
    # one patch, d = 1: every matrix is a scalar or a 4-vector and the block is hand-computable
    cfg = ModelConfig(image_size=2, patch_size=2, channels=1, dim=1, depth=1, num_classes=2, dtype="float64")
    m = VisionModel.create(cfg)
    w1, b1 = np.array([0.5, -1.0, 2.0, 0.3]), np.array([0.1, 0.2, -0.3, 0.0])
    w2, b2 = np.array([1.0, 0.4, -0.7, 2.0]), 0.05
    m = with_values(m, blocks__0__pre1__alpha=1.5, blocks__0__pre1__beta=-0.2,
                    blocks__0__cross_patch__weight=0.8, blocks__0__cross_patch__bias=0.1,
                    blocks__0__post1__scale=0.3, blocks__0__pre2__alpha=0.9, blocks__0__pre2__beta=0.4,
                    blocks__0__fc1__weight=w1.reshape(4, 1), blocks__0__fc1__bias=b1,
                    blocks__0__fc2__weight=w2.reshape(1, 4), blocks__0__fc2__bias=b2,
                    blocks__0__post2__scale=0.6)
    x = 0.7
    z = x + 0.3 * (0.8 * (1.5 * x - 0.2) + 0.1)
    h = 0.9 * z + 0.4
    y = z + 0.6 * (sum(w2[k] * _gelu(w1[k] * h + b1[k]) for k in range(4)) + b2)
    got = block_forward(T.tensor(np.array([[[x]]])), m.blocks[0], cfg).item()
    assert abs(got - y) < 1e-14


def test_token_mixing_is_shared_across_channels(rng):
    cfg = tiny_config(depth=1, dim=4, image_size=4)
    m = randomize(VisionModel.create(cfg))
    x = rng.standard_normal((cfg.num_patches, cfg.dim))
    blk = m.blocks[0]
    a = blk.cross_patch.weight.data
    # the token-mixing residual computed independently per channel column
    h = x * blk.pre1.alpha.data + blk.pre1.beta.data
    expect = x + blk.post1.scale.data * (a @ h + blk.cross_patch.bias.data[:, None])
    got = x + blk.post1.scale.data * cross_patch(T.tensor(x), blk, cfg).data
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-13)


@given(depth=st.integers(1, 3), dim=st.sampled_from([2, 4, 6]), grid=st.integers(1, 3),
       comm=st.sampled_from(["linear", "none", "mlp"]), norm=st.sampled_from(["affine", "layernorm"]))
@settings(max_examples=25, deadline=None)
def test_blocks_preserve_shape(depth, dim, grid, comm, norm):
    cfg = ModelConfig(image_size=2 * grid, patch_size=2, channels=1, dim=dim, depth=depth, num_classes=3,
                      communication=comm, pre_norm=norm, dtype="float64")
    m = VisionModel.create(cfg)
    x = T.tensor(np.random.default_rng(0).standard_normal((2, grid * grid, dim)))
    for blk in m.blocks:
        y = block_forward(x, blk, cfg)
        assert y.shape == x.shape
        x = y


def test_block_rejects_wrong_shape():
    cfg = tiny_config()
    m = VisionModel.create(cfg)
    with pytest.raises(DimensionError):
        block_forward(T.tensor(np.zeros((1, 15, 16))), m.blocks[0], cfg)
    with pytest.raises(DimensionError):
        forward(m, np.zeros((1, 3, 8, 6)))


def test_batch_forward_matches_per_example():
    m = randomize(VisionModel.create(tiny_config(pooling="class_mlp")))
    x = random_images(m.config, 4)
    batched = forward(m, x).data
    for i in range(4):
        np.testing.assert_allclose(forward(m, x[i:i + 1]).data[0], batched[i], rtol=0, atol=1e-12)


def test_class_mlp_with_uniform_weights_is_average_pooling(rng):
    # a single class layer whose aggregate averages the patches, with zero MLP and
    # class token, adds exactly the patch mean to a zero class vector
    cfg = tiny_config(pooling="class_mlp", class_layers=1)
    n = cfg.num_patches
    m = VisionModel.create(cfg)
    agg = np.concatenate([[0.0], np.full(n, 1.0 / n)]).reshape(1, n + 1)
    m = with_values(m, class_head__cls_token=0.0, class_head__layers__0__aggregate__weight=agg,
                    class_head__layers__0__aggregate__bias=0.0, class_head__layers__0__post1__scale=1.0,
                    class_head__layers__0__fc2__weight=0.0, class_head__layers__0__fc2__bias=0.0)
    x = rng.standard_normal((3, n, cfg.dim))
    got = class_mlp_pool(T.tensor(x), m.class_head, cfg).data
    np.testing.assert_allclose(got, x.mean(axis=1), rtol=0, atol=1e-14)


def test_class_mlp_requires_head():
    cfg = tiny_config(pooling="class_mlp")
    with pytest.raises(ConfigurationError):
        class_mlp_pool(T.tensor(np.zeros((1, 16, 16))), None, cfg)


def test_class_mlp_leaves_patches_untouched(rng):
    cfg = tiny_config(pooling="class_mlp")
    m = randomize(VisionModel.create(cfg))
    x = T.tensor(rng.standard_normal((2, cfg.num_patches, cfg.dim)))
    before = x.data.copy()
    class_mlp_pool(x, m.class_head, cfg)
    assert np.array_equal(x.data, before)


def test_class_stop_grad_cuts_patch_gradient(rng):
    for stop in (False, True):
        cfg = tiny_config(pooling="class_mlp", class_stop_grad=stop)
        m = randomize(VisionModel.create(cfg))
        x = T.parameter(rng.standard_normal((1, cfg.num_patches, cfg.dim)))
        with T.GradientTape() as tape:
            loss = T.reduce(class_mlp_pool(x, m.class_head, cfg), kind="sum")
        tape.backward(loss, [x])
        assert (not x.grad.any()) == stop


def test_f32_forward_is_deterministic():
    m = VisionModel.create(tiny_config(dtype="float32"))
    x = random_images(m.config, 3)
    assert forward(m, x).data.tobytes() == forward(m, x).data.tobytes()


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("kw", [
    {"dim": 4, "depth": 1, "image_size": 4},
    {"dim": 4, "depth": 1, "image_size": 4, "communication": "mlp", "comm_expansion": 2},
    {"dim": 4, "depth": 1, "image_size": 4, "pooling": "class_mlp", "class_layers": 1},
    {"dim": 4, "depth": 1, "image_size": 4, "pre_norm": "layernorm", "post_affine_bias": True},
    {"dim": 4, "depth": 1, "image_size": 4, "positional_embedding": True, "activation": "silu"},
])
def test_model_gradcheck_variants(kw):
    m = randomize(VisionModel.create(tiny_config(num_classes=3, **kw)), seed=1)
    x = random_images(m.config, 2, seed=2)
    y = np.array([0, 2])
    assert check_params(lambda: cross_entropy(forward(m, x), y), m.parameters()) < 1e-4
