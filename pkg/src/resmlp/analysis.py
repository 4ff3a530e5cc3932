"""Weight analyses: near-zero rates per layer and filter-grid images of the token-mixing matrices."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .vision import VisionModel

SEPARATOR = 64  # gray level of the 1-pixel lines between tiles
NORMALIZATION = "per-tile min-max to [0,255], constant tile -> 128"


def sparsity_rate(m, tau: float = 0.05) -> float:
    """Fraction of entries with ``|m| < tau * max|m|`` (strict, whole matrix, diagonal included)."""
    a = np.abs(np.asarray(getattr(m, "data", m), dtype=np.float64))
    if a.size == 0:
        raise ContractError("sparsity_rate needs a nonempty matrix")
    # an all-zero matrix has threshold 0 and nothing is strictly below it
    return int(np.count_nonzero(a < tau * a.max())) / a.size


def model_id(model: VisionModel) -> str:
    """Short content hash of the weights, stable across runs."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:12]


@dataclass
class SparsityReport:
    model_id: str
    tau: float
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [f"# model={self.model_id} tau={self.tau:g} denominator=whole-matrix",
                 "layer,rate_A,rate_B,rate_C"]
        lines += [f"{i},{a:.6f},{b:.6f},{c:.6f}" for i, a, b, c in self.rows]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def sparsity_report(model: VisionModel, tau: float = 0.05) -> SparsityReport:
    """Per block rates of A (token mixing; NaN without communication), B (fc1) and C (fc2)."""
    report = SparsityReport(model_id(model), tau)
    for i, blk in enumerate(model.blocks):
        rate_a = sparsity_rate(blk.cross_patch.weight, tau) if blk.cross_patch is not None else math.nan
        report.rows.append((i, rate_a, sparsity_rate(blk.fc1.weight, tau), sparsity_rate(blk.fc2.weight, tau)))
    return report


# ---------------------------------------------------------------- filter grids

@dataclass
class FilterGrid:
    layer: int
    patches: list[int]
    tiles: np.ndarray          # [k, N, N] uint8
    normalization: str = NORMALIZATION
    model_id: str = ""

    def image(self) -> np.ndarray:
        k, n, _ = self.tiles.shape
        cols = math.ceil(math.sqrt(k))
        rows = math.ceil(k / cols)
        img = np.full((rows * (n + 1) - 1, cols * (n + 1) - 1), SEPARATOR, dtype=np.uint8)
        for t in range(k):
            r, c = divmod(t, cols)
            img[r * (n + 1):r * (n + 1) + n, c * (n + 1):c * (n + 1) + n] = self.tiles[t]
        return img

    def to_pgm(self) -> bytes:
        img = self.image()
        h, w = img.shape
        comment = f"# model={self.model_id} layer={self.layer} normalization={self.normalization}"
        return f"P5\n{comment}\n{w} {h}\n255\n".encode("ascii") + img.tobytes()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_pgm())
        return path


def normalize_tile(row: np.ndarray) -> np.ndarray:
    lo, hi = float(row.min()), float(row.max())
    if hi == lo:
        return np.full(row.shape, 128, dtype=np.uint8)
    return np.rint((row - lo) / (hi - lo) * 255.0).astype(np.uint8)


def select_patches(n: int, selection: str | Sequence[int]) -> list[int]:
    """Row indices of A for ``center6x6``, ``all`` or an explicit list over an n×n grid."""
    if selection == "all":
        return list(range(n * n))
    if selection == "center6x6":
        if n < 6:
            raise ContractError(f"center6x6 needs a grid of at least 6x6, got {n}x{n}")
        s = (n - 6) // 2
        return [r * n + c for r in range(s, s + 6) for c in range(s, s + 6)]
    if isinstance(selection, str):
        raise ContractError(f"unknown patch selection {selection!r}")
    idx = [int(i) for i in selection]
    bad = [i for i in idx if not 0 <= i < n * n]
    if bad or not idx:
        raise ContractError(f"patch selection {bad or idx} outside [0, {n * n})")
    return idx


def filter_grid(model: VisionModel, layer: int, patch_selection="center6x6") -> FilterGrid:
    cfg = model.config
    if not 0 <= layer < cfg.depth:
        raise ContractError(f"layer {layer} outside [0, {cfg.depth})")
    blk = model.blocks[layer]
    if blk.cross_patch is None:
        raise ContractError("model has no token-mixing matrix (communication=none)")
    n = cfg.grid
    a = np.asarray(blk.cross_patch.weight.data, dtype=np.float64)
    patches = select_patches(n, patch_selection)
    if max(patches) >= a.shape[0]:
        raise ContractError(f"patch {max(patches)} outside the {a.shape[0]} rows of A")
    tiles = np.stack([normalize_tile(a[k]).reshape(n, n) for k in patches])
    return FilterGrid(layer, patches, tiles, model_id=model_id(model))


def export_filter_grid(model: VisionModel, layer: int, patch_selection="center6x6", path=None) -> FilterGrid:
    """Build the grid of selected rows of A and write it as binary PGM when ``path`` is given."""
    grid = filter_grid(model, layer, patch_selection)
    if path is not None:
        grid.write(path)
    return grid
