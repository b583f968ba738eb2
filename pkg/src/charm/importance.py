"""Cell importance scoring and budgeted cell selection.

A scorer maps one square grayscale cell to a non-negative float; score_cells
applies a scorer over every cell of a grid and returns an ImportanceMap.
select_cells turns a map plus a budget K into a set of chosen cell indices:
the top ceil(threshold_t * K) cells by score form a candidate pool and K of
them are sampled uniformly, so threshold_t = 1 degenerates to a deterministic
top-K while larger values trade selection quality for variety.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .imaging import GridSpec, Image, load_image, resize_nearest_array, to_grayscale

STRATEGIES = ("random", "frequency", "gradient", "entropy", "saliency")
SCORED_STRATEGIES = ("frequency", "gradient", "entropy")


@dataclass(frozen=True)
class ImportanceMap:
    """Per-cell scores for a grid, flattened row-major."""

    grid: GridSpec
    scores: np.ndarray

    def __post_init__(self):
        if self.scores.shape != (self.grid.cell_count,):
            raise ValueError(
                f"scores shape {self.scores.shape} does not match grid "
                f"{self.grid.rows}x{self.grid.cols}"
            )
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite cell score")
        if np.any(self.scores < 0):
            raise ValueError("negative cell score")


@dataclass(frozen=True)
class SelectionConfig:
    strategy: str = "frequency"
    threshold_t: float = 2.0
    seed: int = 0
    per_epoch_resample: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.threshold_t < 1.0:
            raise ValueError("threshold_t must be >= 1")

    def rng_for(self, image_id: str, epoch: int = 0) -> np.random.Generator:
        """Deterministic per-image generator, keyed by (seed, image id, epoch).

        With per_epoch_resample off the epoch is pinned to 0, so repeated
        calls for the same image always reproduce one selection.
        """
        return derive_rng(self.seed, image_id, epoch if self.per_epoch_resample else 0)


def derive_rng(seed: int, image_id: str, epoch: int = 0) -> np.random.Generator:
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    image_key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, image_key, epoch]))


def frequency_score(cell: np.ndarray) -> float:
    """Mean non-DC magnitude of the cell's orthonormal 2-D DFT.

    A pure horizontal cosine of amplitude a on an N x N cell scores a / N.
    The corner sample is subtracted first; that only moves energy in the
    excluded DC bin but makes constant cells score exactly 0.
    """
    _check_cell(cell, min_side=2)
    shifted = cell - cell[0, 0]
    mag = np.abs(np.fft.fft2(shifted, norm="ortho"))
    mag[0, 0] = 0.0
    return float(mag.sum() / cell.size)


def gradient_score(cell: np.ndarray) -> float:
    """Mean Sobel gradient magnitude over interior pixels.

    3x3 Sobel pair; a unit horizontal ramp scores 8 (the kernel's weight sum).
    """
    _check_cell(cell, min_side=3)
    c = cell
    gx = (c[:-2, 2:] + 2.0 * c[1:-1, 2:] + c[2:, 2:]) - (
        c[:-2, :-2] + 2.0 * c[1:-1, :-2] + c[2:, :-2]
    )
    gy = (c[2:, :-2] + 2.0 * c[2:, 1:-1] + c[2:, 2:]) - (
        c[:-2, :-2] + 2.0 * c[:-2, 1:-1] + c[:-2, 2:]
    )
    return float(np.sqrt(gx * gx + gy * gy).mean())


def entropy_score(cell: np.ndarray) -> float:
    """Shannon entropy in bits of the 8-bit-quantized sample histogram."""
    _check_cell(cell, min_side=1)
    levels = np.clip(np.rint(cell * 255.0), 0, 255).astype(np.uint8)
    counts = np.bincount(levels.ravel(), minlength=256)
    p = counts[counts > 0] / levels.size
    return float(-(p * np.log2(p)).sum() + 0.0)


_SCORERS = {
    "frequency": frequency_score,
    "gradient": gradient_score,
    "entropy": entropy_score,
}


def _check_cell(cell: np.ndarray, min_side: int):
    if cell.ndim != 2:
        raise ValueError(f"scorer expects a 2-D grayscale cell, got shape {cell.shape}")
    if cell.shape[0] != cell.shape[1]:
        raise ValueError(f"scorer expects a square cell, got shape {cell.shape}")
    if cell.shape[0] < min_side:
        raise ValueError(f"cell side {cell.shape[0]} below minimum {min_side}")


def score_cells(img: Image, grid: GridSpec, strategy: str) -> ImportanceMap:
    """Score every grid cell of an image with one of the content scorers.

    The image must already be cropped to the grid (rows*cell_px by
    cols*cell_px); scoring happens on the grayscale conversion.
    """
    if strategy not in _SCORERS:
        raise ValueError(f"score_cells does not handle strategy {strategy!r}")
    expected = (grid.rows * grid.cell_px, grid.cols * grid.cell_px)
    if (img.height, img.width) != expected:
        raise ValueError(
            f"image {img.height}x{img.width} not cropped to grid {expected}"
        )
    gray = to_grayscale(img).data[:, :, 0].astype(np.float64)
    scorer = _SCORERS[strategy]
    cp = grid.cell_px
    scores = np.empty(grid.cell_count, dtype=np.float64)
    i = 0
    for r in range(grid.rows):
        for c in range(grid.cols):
            scores[i] = scorer(gray[r * cp : (r + 1) * cp, c * cp : (c + 1) * cp])
            i += 1
    return ImportanceMap(grid, scores)


def load_saliency_map(path, grid: GridSpec) -> ImportanceMap:
    """Per-cell salient fraction from a precomputed mask image.

    The mask is read as grayscale, nearest-neighbor resampled to the grid's
    pixel dims, and thresholded at 0.5; each cell scores the fraction of its
    pixels that are salient. A mask that marks nothing falls back to treating
    every cell as fully salient.
    """
    mask_img = load_image(path)
    mask = to_grayscale(mask_img).data[:, :, 0]
    full = resize_nearest_array(mask, grid.rows * grid.cell_px, grid.cols * grid.cell_px)
    salient = full > 0.5
    cp = grid.cell_px
    blocks = salient.reshape(grid.rows, cp, grid.cols, cp)
    scores = blocks.mean(axis=(1, 3), dtype=np.float64).reshape(-1)
    if not scores.any():
        scores = np.ones_like(scores)
    return ImportanceMap(grid, scores)


def select_cells(
    imap: ImportanceMap | None,
    k: int,
    cfg: SelectionConfig,
    rng: np.random.Generator,
    cell_count: int | None = None,
    candidates: np.ndarray | None = None,
) -> np.ndarray:
    """Choose k cell indices, returned sorted ascending.

    Scored strategies rank candidates by (score desc, index asc), keep the
    top ceil(threshold_t * k) as the pool, and sample k from it uniformly
    without replacement; the random strategy skips straight to sampling.
    candidates restricts selection to a subset of cells (used for staged
    selection); cell_count supplies the universe when no map is given.
    """
    if candidates is not None:
        cand = np.asarray(candidates, dtype=np.int64)
        if cand.size != np.unique(cand).size:
            raise ValueError("duplicate candidate indices")
    elif imap is not None:
        cand = np.arange(imap.grid.cell_count, dtype=np.int64)
    elif cell_count is not None:
        cand = np.arange(cell_count, dtype=np.int64)
    else:
        raise ValueError("need an importance map, cell_count, or candidates")
    if k < 0 or k > cand.size:
        raise ValueError(f"budget k={k} outside [0, {cand.size}]")
    if k == 0:
        return np.empty(0, dtype=np.int64)

    if cfg.strategy == "random":
        chosen = rng.choice(cand, size=k, replace=False)
        return np.sort(chosen)

    if imap is None:
        raise ValueError(f"strategy {cfg.strategy!r} requires an importance map")
    if np.any(cand >= imap.grid.cell_count) or np.any(cand < 0):
        raise ValueError("candidate index outside the map's grid")
    scores = imap.scores[cand]
    # Stable sort on descending score keeps ties in ascending-index order.
    order = np.argsort(-scores, kind="stable")
    pool_size = min(math.ceil(cfg.threshold_t * k), cand.size)
    pool = cand[order[:pool_size]]
    if pool_size == k:
        return np.sort(pool)
    chosen = rng.choice(pool, size=k, replace=False)
    return np.sort(chosen)
