"""Small model builders shared by the test modules."""
import numpy as np

from resmlp import tensor as T
from resmlp.layers import assign_parameters
from resmlp.vision import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=8, patch_size=2, channels=3, dim=16, depth=2, num_classes=5, dtype="float64")
    return ModelConfig(**{**base, **kw})


def with_values(model, **updates):
    """Copy of ``model`` with the named parameters (dots as ``__``) replaced."""
    values = {n: p.data for n, p in model.named_parameters()}
    for key, v in updates.items():
        name = key.replace("__", ".")
        values[name] = np.broadcast_to(np.asarray(v, dtype=values[name].dtype), values[name].shape).copy()
    return assign_parameters(model, values)


def randomize(model, seed=0, scale=0.3):
    """Perturb every parameter (affines, LayerScale and zero biases included) so
    that no gradient path is trivially zero."""
    rng = np.random.default_rng(seed)
    values = {n: p.data + scale * rng.standard_normal(p.shape).astype(p.dtype)
              for n, p in model.named_parameters()}
    return assign_parameters(model, values)


def random_images(cfg: ModelConfig, b: int, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, cfg.channels, cfg.image_size, cfg.image_size)).astype(cfg.np_dtype)


def tape_macs(model, images) -> int:
    """Multiply-accumulates actually executed by the matmuls of one forward pass."""
    with T.GradientTape() as tape:
        model(images)
    return sum(n.out.size * n.parents[0].shape[-1] for n in tape.nodes if n.op == "matmul")


