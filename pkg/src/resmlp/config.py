"""``key = value`` run configuration files.

Keys carry a section prefix: ``model.`` (:class:`ModelConfig`), ``train.``
(:class:`TrainConfig`), ``seq2seq.`` (:class:`Seq2SeqConfig`) or ``data.``
(:class:`DataConfig`). ``model.preset = S12`` starts from a preset and any
explicit ``model.`` key overrides it regardless of order. Parsing is
fail-closed: unknown keys, duplicates, malformed values and constraint
violations raise :class:`ConfigParseError` carrying the line number.
"""
from __future__ import annotations

import re
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigParseError, ResMLPError
from .seq2seq import Seq2SeqConfig
from .training import TrainConfig
from .vision import PRESETS, ModelConfig


@dataclass(frozen=True)
class DataConfig:
    kind: str = "cifar10_binary"
    path: str = "data/cifar-10-batches-bin"
    mean: tuple[float, ...] = (0.4914, 0.4822, 0.4465)
    std: tuple[float, ...] = (0.2470, 0.2435, 0.2616)
    train_limit: int | None = None   # use only the first n training examples
    test_limit: int | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seq2seq: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    data: DataConfig = field(default_factory=DataConfig)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "seq2seq": Seq2SeqConfig, "data": DataConfig}


def _convert(text: str, tp) -> object:
    """Parse ``text`` into the annotated field type ``tp``."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if type(None) in args and text.lower() == "none":
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _convert(text, inner)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_convert(t.strip(), inner) for t in text.split(",") if t.strip())
    if tp is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str, path=None) -> RunConfig:
    hints = {name: typing.get_type_hints(cls) for name, cls in SECTIONS.items()}
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    where: dict[tuple[str, str], int] = {}
    preset = None
    preset_line = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigParseError(f"unknown key {key!r}; keys start with one of {sorted(SECTIONS)}",
                                   lineno, path)
        if (section, name) in where:
            raise ConfigParseError(f"duplicate key {key!r} (first set on line {where[section, name]})",
                                   lineno, path)
        where[section, name] = lineno
        if section == "model" and name == "preset":
            if value not in PRESETS:
                raise ConfigParseError(f"unknown preset {value!r}; expected one of {sorted(PRESETS)}",
                                       lineno, path)
            preset, preset_line = value, lineno
            continue
        if name not in hints[section]:
            raise ConfigParseError(f"unknown key {key!r}", lineno, path)
        try:
            values[section][name] = _convert(value, hints[section][name])
        except ValueError as e:
            raise ConfigParseError(f"bad value for {key!r}: {e}", lineno, path) from None

    out = {}
    for section, cls in SECTIONS.items():
        kwargs = values[section]
        if section == "model" and preset is not None:
            kwargs = {**PRESETS[preset], **kwargs}
        try:
            out[section] = cls(**kwargs)
        except (ResMLPError, ValueError) as e:
            # blame the latest line whose key the message mentions
            lines = [n for (s, k), n in where.items() if s == section and re.search(rf"\b{k}\b", str(e))]
            line = max(lines) if lines else (preset_line if section == "model" else None)
            raise ConfigParseError(f"{section}: {e}", line, path) from None
    return RunConfig(**out)


def parse_config(path) -> RunConfig:
    """Read a UTF-8 config file; an empty file gives the all-defaults configuration."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read config: {e.strerror}", None, path) from None
    except UnicodeDecodeError:
        raise ConfigParseError("config is not valid UTF-8", None, path) from None
    return parse_config_text(text, path)


def format_config(cfg: RunConfig) -> str:
    """Serialize every field explicitly; ``parse_config_text(format_config(c)) == c``."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines += [f"{section}.{f.name} = {_format(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    return "\n".join(lines)
