"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"RMLP" | u32 format_version | u32 header_length | header (UTF-8 JSON)
    | payload | u32 CRC-32 of payload

The header holds the model kind, its configuration and a manifest of
``(name, shape, dtype, offset)``; the payload is the concatenation of the raw
little-endian arrays in manifest order. Float32 models store f32; the float64
models used by gradient checks store f64 so the round trip stays bit-exact.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, ResMLPError
from .layers import assign_parameters

MAGIC = b"RMLP"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _kind_of(model) -> str:
    from .fusion import FusedVisionModel
    from .seq2seq import Seq2SeqModel
    from .vision import VisionModel
    if isinstance(model, FusedVisionModel):
        return "vision_fused"
    if isinstance(model, VisionModel):
        return "vision"
    if isinstance(model, Seq2SeqModel):
        return "seq2seq"
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def _skeleton(kind: str, config: dict):
    if kind == "vision":
        from .vision import ModelConfig, VisionModel
        return VisionModel.create(ModelConfig.from_dict(config))
    if kind == "vision_fused":
        from .fusion import FusedVisionModel
        from .vision import ModelConfig
        return FusedVisionModel.skeleton(ModelConfig.from_dict(config))
    if kind == "seq2seq":
        from .seq2seq import Seq2SeqConfig, Seq2SeqModel
        return Seq2SeqModel.create(Seq2SeqConfig.from_dict(config))
    raise CorruptCheckpointError("header", f"unknown model kind {kind!r}")


def encode(model, metadata: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        tag = "f64" if p.dtype == np.float64 else "f32"
        raw = np.ascontiguousarray(p.data, dtype=_DTYPES[tag]).tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "dtype": tag, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "kind": _kind_of(model),
        "config": model.config.to_dict(),
        "manifest": manifest,
        "payload_bytes": offset,
    }
    if metadata:
        header["metadata"] = metadata
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    return (MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + payload
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def save_checkpoint(model, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(encode(model, metadata))


def read_header(blob: bytes) -> tuple[dict, bytes]:
    """Validate framing and CRC; return (header, payload)."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("magic", "file does not start with RMLP")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError("version", f"found {version}, expected {FORMAT_VERSION}")
    if 12 + hlen > len(blob):
        raise CorruptCheckpointError("crc", "file truncated inside header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError("header", str(e)) from None
    rest = blob[12 + hlen:]
    if len(rest) < 4:
        raise CorruptCheckpointError("crc", "file truncated before checksum")
    payload, (crc,) = rest[:-4], struct.unpack("<I", rest[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("crc", "payload checksum mismatch")
    return header, payload


def decode(blob: bytes):
    header, payload = read_header(blob)
    try:
        kind, config, manifest = header["kind"], header["config"], header["manifest"]
    except KeyError as e:
        raise CorruptCheckpointError("header", f"missing field {e}") from None
    values, end = {}, 0
    for entry in manifest:
        dt = _DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise CorruptCheckpointError("manifest", f"unknown dtype {entry.get('dtype')!r}")
        off, shape = entry["offset"], tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off != end:
            raise CorruptCheckpointError("manifest", f"{entry['name']}: offset {off}, expected {end}")
        if off + nbytes > len(payload):
            raise CorruptCheckpointError("manifest", f"{entry['name']} runs past the payload")
        values[entry["name"]] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize,
                                              offset=off).reshape(shape).astype(dt.newbyteorder("="))
        end = off + nbytes
    if end != len(payload):
        raise CorruptCheckpointError("manifest", f"{len(payload) - end} trailing payload bytes")
    try:
        skeleton = _skeleton(kind, config)
    except (ResMLPError, TypeError) as e:
        raise CorruptCheckpointError("header", f"invalid model config: {e}") from None
    expected = [(n, p.shape) for n, p in skeleton.named_parameters()]
    if expected != [(n, v.shape) for n, v in values.items()]:
        raise CorruptCheckpointError("manifest", "tensor names or shapes do not match the model layout")
    return assign_parameters(skeleton, values)


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
