import numpy as np
import pytest

from resmlp import tensor as T
from resmlp.fusion import FusedVisionModel, count_block_stages, fuse_affine, fused_forward
from resmlp.vision import VisionModel, forward

from helpers import random_images, randomize, tiny_config

VARIANTS = [
    {},
    {"communication": "none"},
    {"communication": "mlp", "comm_expansion": 2},
    {"pooling": "class_mlp"},
    {"pooling": "class_mlp", "pre_norm": "layernorm"},
    {"pre_norm": "layernorm", "post_affine_bias": True},
    {"positional_embedding": True, "activation": "hardswish"},
    {"pooling": "class_mlp", "post_affine_bias": True, "class_layers": 1},
]


@pytest.mark.parametrize("kw", VARIANTS)
def test_fused_matches_unfused_f64(kw):
    m = randomize(VisionModel.create(tiny_config(**kw)), seed=5)
    x = random_images(m.config, 16, seed=6)
    ref, got = forward(m, x).data, fused_forward(fuse_affine(m), x).data
    assert np.abs(ref - got).max() < 1e-10
    assert np.array_equal(ref.argmax(-1), got.argmax(-1))


def test_fused_matches_unfused_f32():
    m = randomize(VisionModel.create(tiny_config(dtype="float32")), seed=5)
    x = random_images(m.config, 16, seed=6)
    ref, got = forward(m, x).data, fuse_affine(m)(x).data
    assert got.dtype == np.float32
    assert np.abs(ref - got).max() < 1e-5


def test_fused_has_fewer_stages():
    m = VisionModel.create(tiny_config())
    f = fuse_affine(m)
    assert count_block_stages(m) - count_block_stages(f) >= 2
    assert count_block_stages(m) == 7 and count_block_stages(f) == 4


def test_fused_has_fewer_parameters_for_average_pooling():
    m = VisionModel.create(tiny_config())
    f = fuse_affine(m)
    assert f.final_affine is None
    # per block only the A bias grows into an [N², d] matrix; every affine vector disappears
    assert all(b.fc1.weight.shape == (64, 16) for b in f.blocks)


def test_fused_tensors_are_constants():
    f = fuse_affine(VisionModel.create(tiny_config()))
    assert not any(p.requires_grad for p in f.parameters())
    x = T.tensor(random_images(f.config, 1))
    with T.GradientTape() as tape:
        f(x)
    assert tape.nodes == []


def test_fusing_leaves_source_model_unchanged():
    m = randomize(VisionModel.create(tiny_config()))
    before = [p.data.copy() for p in m.parameters()]
    fuse_affine(m)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))


def test_skeleton_shapes_match():
    cfg = tiny_config(pooling="class_mlp")
    f = fuse_affine(VisionModel.create(cfg, seed=2))
    s = FusedVisionModel.skeleton(cfg)
    assert [(n, p.shape) for n, p in f.named_parameters()] == [(n, p.shape) for n, p in s.named_parameters()]
