"""ResMLP image classifier: configuration, construction, forward pass and
parameter / MAC accounting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import (AffineParams, Linear, PostScale, channel_mlp, named_parameters,
                     pre_norm, token_linear, trunc_normal)
from .tensor import Tensor

POOLINGS = ("average", "class_mlp")
COMMUNICATIONS = ("linear", "none", "mlp")
PRE_NORMS = ("affine", "layernorm")
ACTIVATION_KINDS = ("gelu", "relu", "silu", "hardswish")
DTYPES = ("float32", "float64")


def default_layerscale(depth: int) -> float:
    if depth <= 18:
        return 0.1
    if depth <= 24:
        return 1e-5
    return 1e-6


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    dim: int = 384
    depth: int = 12
    num_classes: int = 1000
    pooling: str = "average"
    communication: str = "linear"
    comm_expansion: int = 1
    activation: str = "gelu"
    pre_norm: str = "affine"
    post_affine_bias: bool = False
    positional_embedding: bool = False
    layerscale_init: float | None = None
    class_layers: int = 2
    class_stop_grad: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "channels", "dim", "depth", "num_classes",
                     "comm_expansion", "class_layers"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        for name, allowed in (("pooling", POOLINGS), ("communication", COMMUNICATIONS),
                              ("pre_norm", PRE_NORMS), ("activation", ACTIVATION_KINDS),
                              ("dtype", DTYPES)):
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def layerscale(self) -> float:
        return default_layerscale(self.depth) if self.layerscale_init is None else self.layerscale_init

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS: dict[str, dict] = {
    "S12": dict(depth=12, dim=384, patch_size=16),
    "S24": dict(depth=24, dim=384, patch_size=16),
    "B24": dict(depth=24, dim=768, patch_size=16),
    "S12/14": dict(depth=12, dim=384, patch_size=14),
    "S12/8": dict(depth=12, dim=384, patch_size=8),
    "B24/8": dict(depth=24, dim=768, patch_size=8),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------- parameters

@dataclass
class BlockParams:
    pre1: AffineParams | None
    cross_patch: Linear | None       # A: [N², N²], or [eN², N²] for the MLP variant
    cross_patch2: Linear | None      # second token layer of the MLP variant: [N², eN²]
    post1: PostScale | None
    pre2: AffineParams
    fc1: Linear                      # B: [4d, d]
    fc2: Linear                      # C: [d, 4d]
    post2: PostScale


@dataclass
class ClassLayer:
    pre1: AffineParams
    aggregate: Linear                # [1, N²+1] over [class; patches]
    post1: PostScale
    pre2: AffineParams
    fc1: Linear
    fc2: Linear
    post2: PostScale


@dataclass
class ClassMLPHead:
    cls_token: Tensor                # [d]
    layers: list[ClassLayer]


@dataclass
class VisionModel:
    config: ModelConfig = field(metadata={"static": True})
    patch_embed: Linear
    pos_embed: Tensor | None
    blocks: list[BlockParams]
    final_affine: AffineParams
    class_head: ClassMLPHead | None
    head: Linear

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "VisionModel":
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        d, n = config.dim, config.num_patches
        ls = config.layerscale

        def lin(n_in, n_out):
            return Linear.create(rng, n_in, n_out, dtype=dt)

        patch_embed = lin(config.patch_dim, d)
        pos = T.parameter(trunc_normal(rng, (n, d), dtype=dt)) if config.positional_embedding else None
        blocks = []
        for _ in range(config.depth):
            if config.communication == "none":
                pre1 = cp = cp2 = post1 = None
            else:
                pre1 = AffineParams.identity(d, dt)
                if config.communication == "linear":
                    cp, cp2 = lin(n, n), None
                else:
                    hidden = config.comm_expansion * n
                    cp, cp2 = lin(n, hidden), lin(hidden, n)
                post1 = PostScale.create(d, ls, config.post_affine_bias, dt)
            blocks.append(BlockParams(
                pre1=pre1, cross_patch=cp, cross_patch2=cp2, post1=post1,
                pre2=AffineParams.identity(d, dt), fc1=lin(d, 4 * d), fc2=lin(4 * d, d),
                post2=PostScale.create(d, ls, config.post_affine_bias, dt)))
        class_head = None
        if config.pooling == "class_mlp":
            layers = [ClassLayer(
                pre1=AffineParams.identity(d, dt), aggregate=lin(n + 1, 1),
                post1=PostScale.create(d, ls, config.post_affine_bias, dt),
                pre2=AffineParams.identity(d, dt), fc1=lin(d, 4 * d), fc2=lin(4 * d, d),
                post2=PostScale.create(d, ls, config.post_affine_bias, dt))
                for _ in range(config.class_layers)]
            class_head = ClassMLPHead(T.parameter(trunc_normal(rng, (d,), dtype=dt)), layers)
        return cls(config=config, patch_embed=patch_embed, pos_embed=pos, blocks=blocks,
                   final_affine=AffineParams.identity(d, dt), class_head=class_head,
                   head=lin(d, config.num_classes))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in named_parameters(self)]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)


# ---------------------------------------------------------------- forward pass

def patchify(images, p: int) -> Tensor:
    """[.., C, H, W] -> [.., N², C·p²]; row i·N+j holds patch (i, j) flattened
    channel-major, then row, then column."""
    x = images if isinstance(images, Tensor) else T.tensor(images)
    if x.ndim < 3:
        raise DimensionError(f"patchify expects [..., C, H, W], got {x.shape}")
    *lead, c, h, w = x.shape
    if h != w or h % p:
        raise DimensionError(f"image {h}x{w} cannot be split into {p}x{p} patches")
    n = h // p
    k = len(lead)
    x = T.reshape(x, (*lead, c, n, p, n, p))
    x = T.permute(x, (*range(k), k + 1, k + 3, k, k + 2, k + 4))
    return T.reshape(x, (*lead, n * n, c * p * p))


def _check_tokens(x: Tensor, cfg: ModelConfig) -> None:
    if x.shape[-2:] != (cfg.num_patches, cfg.dim):
        raise DimensionError(
            f"block input {x.shape} does not match [{cfg.num_patches} x {cfg.dim}] from config")


def cross_patch(x: Tensor, p: BlockParams, cfg: ModelConfig) -> Tensor:
    """Residual branch of the token-mixing sublayer (before LayerScale)."""
    h = pre_norm(x, p.pre1, cfg.pre_norm)
    if cfg.communication == "linear":
        return token_linear(h, p.cross_patch.weight, p.cross_patch.bias)
    h = T.activation(token_linear(h, p.cross_patch.weight, p.cross_patch.bias), cfg.activation)
    return token_linear(h, p.cross_patch2.weight, p.cross_patch2.bias)


def block_forward(x: Tensor, p: BlockParams, cfg: ModelConfig) -> Tensor:
    """One residual block: token mixing then the per-token MLP. [.., N², d] -> same."""
    _check_tokens(x, cfg)
    if cfg.communication != "none":
        x = x + p.post1(cross_patch(x, p, cfg))
    h = pre_norm(x, p.pre2, cfg.pre_norm)
    return x + p.post2(channel_mlp(h, p.fc1, p.fc2, cfg.activation))


def class_mlp_pool(x: Tensor, head: ClassMLPHead | None, cfg: ModelConfig) -> Tensor:
    """Update a class vector from the (unchanged) patch embeddings.

    ``x`` is [b, N², d] or [N², d]; returns [b, d] or [d]. Patch rows are only
    read. With ``cfg.class_stop_grad`` they are also cut from the gradient.
    """
    if head is None:
        raise ConfigurationError("class_mlp pooling requires class head parameters")
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1, *x.shape))
    b, _, d = x.shape
    patches = x.detach() if cfg.class_stop_grad else x
    cls = T.broadcast_to(T.reshape(head.cls_token, (1, 1, d)), (b, 1, d))
    for layer in head.layers:
        tokens = T.concat([cls, patches], axis=1)
        h = pre_norm(tokens, layer.pre1, cfg.pre_norm)
        agg = token_linear(h, layer.aggregate.weight, layer.aggregate.bias)
        cls = cls + layer.post1(agg)
        h = pre_norm(cls, layer.pre2, cfg.pre_norm)
        cls = cls + layer.post2(channel_mlp(h, layer.fc1, layer.fc2, cfg.activation))
    out = T.reshape(cls, (b, d))
    return T.reshape(out, (d,)) if single else out


def embed(model: VisionModel, batch) -> Tensor:
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else T.tensor(np.asarray(batch), dtype=cfg.np_dtype)
    if x.dtype != cfg.np_dtype:
        x = x.astype(cfg.np_dtype)
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"batch {x.shape} does not match [b x {cfg.channels} x {cfg.image_size} x {cfg.image_size}]")
    tokens = model.patch_embed(patchify(x, cfg.patch_size))
    if model.pos_embed is not None:
        tokens = tokens + model.pos_embed
    return tokens


def pool(model: VisionModel, x: Tensor) -> Tensor:
    if model.config.pooling == "average":
        return T.reduce(x, axis=-2, kind="mean")
    return class_mlp_pool(x, model.class_head, model.config)


def forward(model: VisionModel, batch) -> Tensor:
    """[b, C, H, W] -> logits [b, num_classes]."""
    x = embed(model, batch)
    for blk in model.blocks:
        x = block_forward(x, blk, model.config)
    x = model.final_affine(x)
    return model.head(pool(model, x))


# ---------------------------------------------------------------- accounting

def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    d, n, k = cfg.dim, cfg.num_patches, cfg.num_classes
    post = 2 * d if cfg.post_affine_bias else d
    mlp = (4 * d * d + 4 * d) + (4 * d * d + d)
    if cfg.communication == "linear":
        comm = 2 * d + (n * n + n) + post
    elif cfg.communication == "mlp":
        e = cfg.comm_expansion * n
        comm = 2 * d + (e * n + e) + (n * e + n) + post
    else:
        comm = 0
    block = comm + 2 * d + mlp + post
    out = {
        "patch_embed": cfg.patch_dim * d + d,
        "pos_embed": n * d if cfg.positional_embedding else 0,
        "blocks": cfg.depth * block,
        "final_affine": 2 * d,
        "class_head": 0,
        "head": d * k + k,
    }
    if cfg.pooling == "class_mlp":
        layer = 2 * d + (n + 1) + 1 + post + 2 * d + mlp + post
        out["class_head"] = d + cfg.class_layers * layer
    return out


def count_params(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars of the model built from ``cfg``."""
    return sum(param_breakdown(cfg).values())


def flop_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Multiply-accumulates per image. Affine, activation, residual and pooling
    costs are not counted."""
    d, n = cfg.dim, cfg.num_patches
    if cfg.communication == "linear":
        comm = n * n * d
    elif cfg.communication == "mlp":
        comm = 2 * cfg.comm_expansion * n * n * d
    else:
        comm = 0
    out = {
        "patch_embed": n * cfg.patch_dim * d,
        "blocks": cfg.depth * (comm + n * 8 * d * d),
        "class_head": 0,
        "head": d * cfg.num_classes,
    }
    if cfg.pooling == "class_mlp":
        out["class_head"] = cfg.class_layers * ((n + 1) * d + 8 * d * d)
    return out


def count_flops(cfg: ModelConfig) -> int:
    return sum(flop_breakdown(cfg).values())

