"""Dataset ingestion: CIFAR-10 binary batches, raw numpy tensor dirs and parallel text."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .seq2seq import Vocabulary
from .training import ArrayDataset
from .translation import read_parallel_text

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_FILES = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}
KINDS = ("cifar10_binary", "raw_tensor_dir", "parallel_text")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    path: str
    split: str = "train"
    mean: tuple[float, ...] = CIFAR_MEAN
    std: tuple[float, ...] = CIFAR_STD

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")


def read_cifar_records(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary file -> uint8 images [n, 3, 32, 32] and labels [n]."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        offset = raw.size // CIFAR_RECORD * CIFAR_RECORD
        raise DataError(f"{path}: incomplete {CIFAR_RECORD}-byte record at byte offset {offset} "
                        f"({raw.size - offset} bytes left)")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    """uint8 pixels -> [0,1] -> per-channel (x - mean) / std, as float32."""
    x = pixels.astype(np.float32) / np.float32(255.0) if pixels.dtype == np.uint8 else pixels.astype(np.float32)
    c = x.shape[1]
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if mean.size not in (1, c) or std.size not in (1, c):
        raise DataError(f"normalization needs 1 or {c} channel statistics")
    if np.any(std == 0):
        raise DataError("normalization std must be nonzero")
    return (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)


def _cifar(spec: DatasetSpec) -> ArrayDataset:
    root = Path(spec.path)
    files = [root] if root.is_file() else [root / f for f in CIFAR_FILES[spec.split]]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise DataError(f"missing CIFAR-10 files: {', '.join(missing)}")
    parts = [read_cifar_records(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return ArrayDataset(normalize(images, spec.mean, spec.std), labels, 10)


def _raw_dir(spec: DatasetSpec) -> ArrayDataset:
    root = Path(spec.path)
    img_path, lab_path = root / f"{spec.split}_images.npy", root / f"{spec.split}_labels.npy"
    for p in (img_path, lab_path):
        if not p.exists():
            raise DataError(f"missing {p}")
    images, labels = np.load(img_path), np.load(lab_path).astype(np.int64)
    if images.ndim != 4 or len(images) != len(labels):
        raise DataError(f"{root}: expected images [n,C,H,W] and labels [n], got {images.shape} and {labels.shape}")
    return ArrayDataset(normalize(images, spec.mean, spec.std), labels, int(labels.max()) + 1)


def load_dataset(spec: DatasetSpec, vocab: Vocabulary | None = None):
    """Images as an :class:`ArrayDataset` in file order; parallel text as ``(pairs, vocab)``."""
    if spec.kind == "cifar10_binary":
        return _cifar(spec)
    if spec.kind == "raw_tensor_dir":
        return _raw_dir(spec)
    if not Path(spec.path).exists():
        raise DataError(f"missing {spec.path}")
    return read_parallel_text(spec.path, vocab, grow=vocab is None)


def find_cifar10() -> Path | None:
    """``$RESMLP_CIFAR10_DIR`` or ``./data/cifar-10-batches-bin`` if it holds the binary batches."""
    for cand in (os.environ.get("RESMLP_CIFAR10_DIR"), "data/cifar-10-batches-bin"):
        if cand and all((Path(cand) / f).exists() for fs in CIFAR_FILES.values() for f in fs):
            return Path(cand)
    return None
