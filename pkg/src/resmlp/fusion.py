"""Inference-time folding of Affine / LayerScale vectors into neighbouring
linear maps.

A pre-norm ``Aff(α, β)`` followed by a channel linear ``(W, b)`` becomes
``(W·Diag(α), W·β + b)``; a LayerScale ``s`` (plus optional bias ``γ``) after
a linear becomes ``(Diag(s)·W, s⊙b + γ)``. For the token-mixing layer the
channel scale cannot enter ``A`` (it acts on the other axis), so the pair
pre-Aff / LayerScale collapses into one channel scale ``u`` and a bias matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import AffineParams, Linear, assign_parameters, named_parameters
from .tensor import Tensor
from .vision import ModelConfig, VisionModel, block_forward, patchify


@dataclass
class FusedBlock:
    cross_patch: Linear | None       # A (bias folded into mix_bias)
    hidden_scale: Tensor | None      # MLP-communication variant only
    hidden_bias: Tensor | None
    cross_patch2: Linear | None
    mix_scale: Tensor | None         # u = s ⊙ α
    mix_bias: Tensor | None          # [N², d]
    fc1: Linear
    fc2: Linear


@dataclass
class FusedClassLayer:
    self_scale: Tensor | None        # affine pre-norm only: class-row coefficient
    aggregate: Tensor                # [1, N²] (affine) or [1, N²+1] (layernorm)
    agg_scale: Tensor
    agg_bias: Tensor
    fc1: Linear
    fc2: Linear


@dataclass
class FusedClassHead:
    cls_token: Tensor
    layers: list[FusedClassLayer]


@dataclass
class FusedVisionModel:
    config: ModelConfig = field(metadata={"static": True})
    embed_weight: Tensor             # [d, C·p²]
    embed_bias: Tensor               # [N², d], includes the positional table
    blocks: list[FusedBlock]
    final_affine: AffineParams | None  # kept only where it cannot be folded
    class_head: FusedClassHead | None
    head: Linear

    fused = True

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in named_parameters(self)]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, batch) -> Tensor:
        return fused_forward(self, batch)

    @classmethod
    def skeleton(cls, config: ModelConfig) -> "FusedVisionModel":
        return fuse_affine(VisionModel.create(config, seed=0))

    def with_arrays(self, values: dict[str, np.ndarray]) -> "FusedVisionModel":
        return assign_parameters(self, values)


def _c(arr) -> Tensor:
    # fused tensors are constants; keep them out of any tape
    return T.Tensor(arr, dtype=arr.dtype)


def _fold_in(lin: Linear, aff: AffineParams) -> tuple[np.ndarray, np.ndarray]:
    w, a, b = lin.weight.data, aff.alpha.data, aff.beta.data
    bias = lin.bias.data if lin.bias is not None else np.zeros(w.shape[0], dtype=w.dtype)
    return w * a, w @ b + bias


def _fold_out(w: np.ndarray, bias: np.ndarray, post) -> tuple[np.ndarray, np.ndarray]:
    s = post.scale.data
    new_b = s * bias
    if post.bias is not None:
        new_b = new_b + post.bias.data
    return s[:, None] * w, new_b


def _fold_channel_mlp(fc1: Linear, fc2: Linear, pre: AffineParams, post) -> tuple[Linear, Linear]:
    w1, b1 = _fold_in(fc1, pre)
    w2, b2 = _fold_out(fc2.weight.data, fc2.bias.data, post)
    return Linear(_c(w1), _c(b1)), Linear(_c(w2), _c(b2))


def _fold_token_layer(lin: Linear, pre: AffineParams) -> tuple[np.ndarray, np.ndarray]:
    """A·(α⊙h + β) + b  ->  (A·h)⊙α + bias matrix."""
    w = lin.weight.data
    bias = lin.bias.data if lin.bias is not None else np.zeros(w.shape[0], dtype=w.dtype)
    return pre.alpha.data, w.sum(axis=1)[:, None] * pre.beta.data[None, :] + bias[:, None]


def _fuse_block(blk, cfg: ModelConfig) -> FusedBlock:
    cp = hs = hb = cp2 = ms = mb = None
    if cfg.communication != "none":
        s = blk.post1.scale.data
        gamma = blk.post1.bias.data if blk.post1.bias is not None else 0.0
        if cfg.communication == "linear":
            alpha, bias = _fold_token_layer(blk.cross_patch, blk.pre1)
            cp = Linear(_c(blk.cross_patch.weight.data), None)
            ms, mb = _c(s * alpha), _c(s * bias + gamma)
        else:
            alpha, bias = _fold_token_layer(blk.cross_patch, blk.pre1)
            cp = Linear(_c(blk.cross_patch.weight.data), None)
            hs, hb = _c(alpha), _c(bias)
            cp2 = Linear(_c(blk.cross_patch2.weight.data), None)
            b2 = blk.cross_patch2.bias.data
            ms = _c(s)
            mb = _c(s * np.broadcast_to(b2[:, None], (b2.size, s.size)) + gamma)
    fc1, fc2 = _fold_channel_mlp(blk.fc1, blk.fc2, blk.pre2, blk.post2)
    return FusedBlock(cp, hs, hb, cp2, ms, mb, fc1, fc2)


def _fuse_class_head(model: VisionModel) -> tuple[FusedClassHead, AffineParams | None]:
    cfg = model.config
    head = model.class_head
    fa, fb = model.final_affine.alpha.data, model.final_affine.beta.data
    layers = []
    for layer in head.layers:
        w = layer.aggregate.weight.data          # [1, N²+1]
        b = layer.aggregate.bias.data            # [1]
        a1, b1 = layer.pre1.alpha.data, layer.pre1.beta.data
        s1 = layer.post1.scale.data
        g1 = layer.post1.bias.data if layer.post1.bias is not None else 0.0
        fc1, fc2 = _fold_channel_mlp(layer.fc1, layer.fc2, layer.pre2, layer.post2)
        if cfg.pre_norm == "affine":
            w0, wp = w[0, 0], w[:, 1:]
            self_scale = 1.0 + s1 * a1 * w0
            agg_scale = s1 * a1 * fa
            const = w0 * b1 + a1 * fb * wp.sum() + wp.sum() * b1 + b[0]
            layers.append(FusedClassLayer(_c(self_scale.astype(w.dtype)), _c(wp), _c(agg_scale),
                                          _c((s1 * const + g1).astype(w.dtype)), fc1, fc2))
        else:
            layers.append(FusedClassLayer(None, _c(w), _c(s1 * a1),
                                          _c((s1 * (b1 * w.sum() + b[0]) + g1).astype(w.dtype)), fc1, fc2))
    keep_final = None
    if cfg.pre_norm == "layernorm":
        keep_final = AffineParams(_c(fa), _c(fb))
    return FusedClassHead(_c(head.cls_token.data), layers), keep_final


def fuse_affine(model: VisionModel) -> FusedVisionModel:
    """Return the inference form of ``model``; the computed function is unchanged."""
    cfg = model.config
    pe = model.patch_embed
    embed_bias = np.broadcast_to(pe.bias.data, (cfg.num_patches, cfg.dim))
    if model.pos_embed is not None:
        embed_bias = embed_bias + model.pos_embed.data
    blocks = [_fuse_block(blk, cfg) for blk in model.blocks]
    if cfg.pooling == "average":
        w, b = _fold_in(model.head, model.final_affine)
        return FusedVisionModel(cfg, _c(pe.weight.data), _c(embed_bias), blocks, None, None,
                                Linear(_c(w), _c(b)))
    class_head, final = _fuse_class_head(model)
    return FusedVisionModel(cfg, _c(pe.weight.data), _c(embed_bias), blocks, final, class_head,
                            Linear(_c(model.head.weight.data), _c(model.head.bias.data)))


def _norm(x: Tensor, cfg: ModelConfig) -> Tensor:
    return T.layer_norm(x) if cfg.pre_norm == "layernorm" else x


def fused_block_forward(x: Tensor, blk: FusedBlock, cfg: ModelConfig) -> Tensor:
    if blk.cross_patch is not None:
        m = T.matmul(blk.cross_patch.weight, _norm(x, cfg))
        if blk.cross_patch2 is not None:
            h = T.activation(T.add(T.scale_shift(m, blk.hidden_scale), blk.hidden_bias), cfg.activation)
            m = T.matmul(blk.cross_patch2.weight, h)
        x = x + T.add(T.scale_shift(m, blk.mix_scale), blk.mix_bias)
    h = T.activation(blk.fc1(_norm(x, cfg)), cfg.activation)
    return x + blk.fc2(h)


def _fused_class_pool(model: FusedVisionModel, x: Tensor) -> Tensor:
    cfg = model.config
    b, _, d = x.shape
    cls = T.broadcast_to(T.reshape(model.class_head.cls_token, (1, 1, d)), (b, 1, d))
    patches = model.final_affine(x) if model.final_affine is not None else x
    for layer in model.class_head.layers:
        if layer.self_scale is not None:
            agg = T.matmul(layer.aggregate, patches)
            cls = T.scale_shift(cls, layer.self_scale) + T.scale_shift(agg, layer.agg_scale, layer.agg_bias)
        else:
            tokens = T.layer_norm(T.concat([cls, patches], axis=1))
            cls = cls + T.scale_shift(T.matmul(layer.aggregate, tokens), layer.agg_scale, layer.agg_bias)
        cls = cls + layer.fc2(T.activation(layer.fc1(_norm(cls, cfg)), cfg.activation))
    return T.reshape(cls, (b, d))


def fused_forward(model: FusedVisionModel, batch) -> Tensor:
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else T.tensor(np.asarray(batch), dtype=cfg.np_dtype)
    if x.dtype != cfg.np_dtype:
        x = x.astype(cfg.np_dtype)
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"batch {x.shape} does not match [b x {cfg.channels} x {cfg.image_size} x {cfg.image_size}]")
    x = T.linear(patchify(x, cfg.patch_size), model.embed_weight) + model.embed_bias
    for blk in model.blocks:
        x = fused_block_forward(x, blk, cfg)
    if model.class_head is None:
        return model.head(T.reduce(x, axis=-2, kind="mean"))
    return model.head(_fused_class_pool(model, x))


MATMUL_EQUIVALENT_OPS = ("matmul", "scale", "scale_shift")


def count_block_stages(model, block_index: int = 0) -> int:
    """Number of matmul-equivalent primitives (matrix products and per-channel
    Diag scalings) one block executes."""
    cfg = model.config
    x = T.parameter(np.zeros((1, cfg.num_patches, cfg.dim), dtype=cfg.np_dtype))
    with T.GradientTape() as tape:
        if isinstance(model, FusedVisionModel):
            fused_block_forward(x, model.blocks[block_index], cfg)
        else:
            block_forward(x, model.blocks[block_index], cfg)
    return sum(1 for node in tape.nodes if node.op in MATMUL_EQUIVALENT_OPS)
