"""Parameter containers and small building blocks shared by the vision and
sequence models."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


@dataclass
class AffineParams:
    alpha: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, dim: int, dtype=np.float32) -> "AffineParams":
        return cls(T.parameter(np.ones(dim, dtype=dtype)), T.parameter(np.zeros(dim, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.scale_shift(x, self.alpha, self.beta)


@dataclass
class PostScale:
    """LayerScale vector, optionally with the bias that makes it a full Aff."""
    scale: Tensor
    bias: Tensor | None = None

    @classmethod
    def create(cls, dim: int, init: float, with_bias: bool, dtype=np.float32) -> "PostScale":
        bias = T.parameter(np.zeros(dim, dtype=dtype)) if with_bias else None
        return cls(T.parameter(np.full(dim, init, dtype=dtype)), bias)

    def __call__(self, x: Tensor) -> Tensor:
        return T.scale_shift(x, self.scale, self.bias)


@dataclass
class Linear:
    weight: Tensor  # [out, in]
    bias: Tensor | None

    @classmethod
    def create(cls, rng, n_in: int, n_out: int, bias: bool = True, dtype=np.float32) -> "Linear":
        w = T.parameter(trunc_normal(rng, (n_out, n_in), dtype=dtype))
        b = T.parameter(np.zeros(n_out, dtype=dtype)) if bias else None
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def pre_norm(x: Tensor, params: AffineParams, kind: str) -> Tensor:
    if kind == "affine":
        return params(x)
    if kind == "layernorm":
        return params(T.layer_norm(x))
    raise ConfigurationError(f"unknown pre-normalisation {kind!r}")


def channel_mlp(x: Tensor, fc1: Linear, fc2: Linear, act: str) -> Tensor:
    return fc2(T.activation(fc1(x), act))


def token_linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Apply ``weight`` [m, n] along the token axis of ``x`` [..., n, d]."""
    y = T.matmul(weight, x)
    if bias is not None:
        y = T.add(y, T.reshape(bias, (bias.shape[0], 1)))
    return y


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists in declaration order yielding (dotted name, parameter)."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def assign_parameters(obj, values: dict[str, np.ndarray], prefix: str = ""):
    """Return a copy of ``obj`` with every parameter replaced from ``values``."""
    if obj is None:
        return None
    if isinstance(obj, Tensor):
        arr = values[prefix]
        if arr.shape != obj.shape:
            raise ConfigurationError(f"{prefix}: shape {arr.shape} does not match {obj.shape}")
        return T.Tensor(arr, dtype=arr.dtype, requires_grad=obj.requires_grad)
    if dataclasses.is_dataclass(obj):
        kw = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if f.metadata.get("static"):
                kw[f.name] = v
            else:
                kw[f.name] = assign_parameters(v, values, f"{prefix}.{f.name}" if prefix else f.name)
        return type(obj)(**kw)
    if isinstance(obj, list):
        return [assign_parameters(v, values, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj)]
    return obj
