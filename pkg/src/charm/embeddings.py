"""Position and scale embeddings for multi-scale token packs.

A pretrained position grid is interpolated (channel-wise bilinear, same
kernel as image resampling) to each scale's grid dims; tokens then look up
their row/col in the grid for their own scale. The CLS vector is kept
verbatim and pad rows receive zeros, so padding cannot leak position signal.
Scale embeddings are one learned vector per scale added to every token of
that scale; pad rows get the dedicated mask vector instead (applied at
sequence assembly, see vit_core).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import resize_bilinear_array
from .tokenizer import TokenPack


@dataclass(frozen=True)
class PosGrid:
    """Pretrained position embeddings: (rows, cols, dim) grid + CLS vector."""

    grid: np.ndarray
    cls_vector: np.ndarray

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ValueError(f"expected (rows, cols, dim) grid, got {self.grid.shape}")
        if self.cls_vector.shape != (self.grid.shape[2],):
            raise ValueError("cls vector dim does not match grid dim")

    @property
    def dim(self) -> int:
        return self.grid.shape[2]


@dataclass(frozen=True)
class EmbeddingTable:
    """Learned per-scale vectors plus the pad-row mask vector."""

    scale_vectors: np.ndarray  # (num_scales, dim)
    mask_vector: np.ndarray  # (dim,)

    def __post_init__(self):
        if self.scale_vectors.ndim != 2:
            raise ValueError("scale_vectors must be (num_scales, dim)")
        if self.mask_vector.shape != (self.scale_vectors.shape[1],):
            raise ValueError("mask vector dim does not match scale vectors")

    @property
    def num_scales(self) -> int:
        return self.scale_vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.scale_vectors.shape[1]


def interpolate_grid(src: PosGrid, rows: int, cols: int) -> np.ndarray:
    """Resample the position grid to (rows, cols, dim), channel-wise bilinear.

    Identity (bit-exact) when the target dims equal the source dims; the CLS
    vector is never part of the interpolation.
    """
    return resize_bilinear_array(src.grid, rows, cols)


def position_for_tokens(pack: TokenPack, src: PosGrid) -> np.ndarray:
    """Per-token position rows: (pack.length, dim), zeros on pad rows.

    Each scale present in the pack gets the source grid interpolated to that
    scale's grid dims; tokens then index it by their (row, col).
    """
    out = np.zeros((pack.length, src.dim), dtype=src.grid.dtype)
    for sid, (rows, cols) in enumerate(pack.grid_dims):
        sel = pack.valid_mask & (pack.scale_ids == sid)
        if not np.any(sel):
            continue
        coords = pack.coords[sel].astype(np.int64)
        if np.any(coords[:, 0] >= rows) or np.any(coords[:, 1] >= cols):
            raise ValueError(f"token coords outside the scale-{sid} grid")
        grid = interpolate_grid(src, rows, cols)
        out[sel] = grid[coords[:, 0], coords[:, 1]]
    return out


def scale_embed(pack: TokenPack, table: EmbeddingTable) -> np.ndarray:
    """Per-token scale rows: (pack.length, dim), zeros on pad rows."""
    present = np.unique(pack.scale_ids[pack.valid_mask])
    if present.size and present.max() >= table.num_scales:
        raise ValueError(
            f"pack uses scale {int(present.max())} but table has {table.num_scales}"
        )
    out = np.zeros((pack.length, table.dim), dtype=table.scale_vectors.dtype)
    valid = pack.valid_mask
    out[valid] = table.scale_vectors[pack.scale_ids[valid].astype(np.int64)]
    return out


def synthetic_pos_grid(rows: int, cols: int, dim: int, seed: int = 0) -> PosGrid:
    """Deterministic stand-in for a pretrained position grid."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, rows, cols, dim]))
    grid = rng.normal(0.0, 0.02, size=(rows, cols, dim)).astype(np.float32)
    cls_vector = rng.normal(0.0, 0.02, size=dim).astype(np.float32)
    return PosGrid(grid, cls_vector)


def init_embedding_table(num_scales: int, dim: int, seed: int = 0) -> EmbeddingTable:
    """Fresh scale/mask vectors, Gaussian with std 0.02."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, num_scales, dim]))
    return EmbeddingTable(
        scale_vectors=rng.normal(0.0, 0.02, size=(num_scales, dim)).astype(np.float32),
        mask_vector=rng.normal(0.0, 0.02, size=dim).astype(np.float32),
    )
