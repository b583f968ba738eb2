"""Image loading, grids, and the shared resampling kernels.

Images are float32 arrays shaped (height, width, channels) with samples in
[0, 1], channels last, one or three channels. Every resampling consumer in the
package (token downscaling, position-grid interpolation, saliency masks) goes
through the two kernels defined here so the coordinate convention is pinned in
exactly one place: output pixel centers map to input coordinates via

    src = (dst + 0.5) * (in_size / out_size) - 0.5

with neighbor indices clamped to the valid range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class Image:
    """A decoded image: float32 (h, w, c) samples in [0, 1], c in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, c) with c in (1, 3), got {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError("zero-dimension image")
        if d.dtype != np.float32:
            raise ValueError(f"expected float32 samples, got {d.dtype}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class GridSpec:
    """A cell grid laid over an image: rows x cols cells of cell_px pixels."""

    cell_px: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.cell_px < 1 or self.rows < 1 or self.cols < 1:
            raise ValueError(f"degenerate grid {self!r}")

    @property
    def cell_count(self) -> int:
        return self.rows * self.cols


def seq_len(height: int, width: int, patch_size: int) -> int:
    """Number of non-overlapping patch_size cells that fit in an image."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    if height < 1 or width < 1:
        raise ValueError("degenerate image dimensions")
    return (height // patch_size) * (width // patch_size)


def load_image(path) -> Image:
    """Decode a PNG or JPEG file to a float32 image in [0, 1].

    Grayscale files stay single-channel; palette and alpha modes are
    converted to RGB; 16-bit grayscale is scaled by its own full range.
    """
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32) / 255.0
                arr = arr[:, :, None]
            elif im.mode in ("I", "I;16"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
                arr = arr[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"zero-dimension image {path}")
    return Image(np.ascontiguousarray(arr))


def to_grayscale(img: Image) -> Image:
    """Luma conversion with weights (0.299, 0.587, 0.114); identity on 1-channel."""
    if img.channels == 1:
        return img
    w = np.asarray(GRAY_WEIGHTS, dtype=np.float32)
    gray = img.data @ w
    return Image(gray[:, :, None].astype(np.float32))


def _axis_samples(in_size: int, out_size: int, dtype):
    # Half-pixel-center source positions for one axis, clamped neighbors.
    pos = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = (pos - lo).astype(dtype)
    hi = np.clip(lo + 1, 0, in_size - 1)
    lo = np.clip(lo, 0, in_size - 1)
    return lo, hi, frac


def resize_bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Shared bilinear kernel on (..., h, w, c) arrays.

    Identity (bit-exact copy) when the output dims equal the input dims.
    Output values are clamped to the per-channel source range so float
    rounding can never push a sample outside [min, max] of its inputs.
    Leading batch dims are resampled independently with the same weights.
    """
    if arr.ndim < 3:
        raise ValueError(f"expected (..., h, w, c), got shape {arr.shape}")
    h, w = arr.shape[-3], arr.shape[-2]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate target dims ({out_h}, {out_w})")
    if h < 1 or w < 1:
        raise ValueError("degenerate source dims")
    if (out_h, out_w) == (h, w):
        return arr.copy()
    y0, y1, ty = _axis_samples(h, out_h, arr.dtype)
    x0, x1, tx = _axis_samples(w, out_w, arr.dtype)
    top = np.take(arr, y0, axis=-3)
    bot = np.take(arr, y1, axis=-3)
    rows = top + (bot - top) * ty[:, None, None]
    left = np.take(rows, x0, axis=-2)
    right = np.take(rows, x1, axis=-2)
    out = left + (right - left) * tx[:, None]
    lo = arr.min(axis=(-3, -2), keepdims=True)
    hi = arr.max(axis=(-3, -2), keepdims=True)
    return np.clip(out, lo, hi)


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    return Image(resize_bilinear_array(img.data, out_h, out_w))


def resize_nearest_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resampling with the same half-pixel-center mapping."""
    if arr.ndim < 2:
        raise ValueError(f"expected at least (h, w), got shape {arr.shape}")
    h, w = arr.shape[0], arr.shape[1]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate target dims ({out_h}, {out_w})")
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), 0, h - 1)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), 0, w - 1)
    return arr[ys][:, xs]


def max_edge_downscale(img: Image, max_edge: int) -> Image:
    """Cap the longer edge at max_edge, preserving aspect ratio.

    The shorter edge is rounded to the nearest integer, at least 1. Images
    already within the cap are returned unchanged.
    """
    if max_edge < 1:
        raise ValueError("max_edge must be >= 1")
    h, w = img.height, img.width
    long_edge = max(h, w)
    if long_edge <= max_edge:
        return img
    scale = max_edge / long_edge
    if h >= w:
        out_h, out_w = max_edge, max(1, int(w * scale + 0.5))
    else:
        out_h, out_w = max(1, int(h * scale + 0.5)), max_edge
    return resize_bilinear(img, out_h, out_w)


def crop_to_grid(img: Image, cell_px: int) -> tuple[Image, GridSpec]:
    """Crop to the largest top-left-anchored multiple of cell_px.

    Raises if the image is smaller than one cell on either axis.
    """
    if cell_px < 1:
        raise ValueError("cell_px must be >= 1")
    rows = img.height // cell_px
    cols = img.width // cell_px
    if rows < 1 or cols < 1:
        raise ValueError(
            f"image {img.height}x{img.width} smaller than one {cell_px}px cell"
        )
    cropped = img.data[: rows * cell_px, : cols * cell_px]
    return Image(np.ascontiguousarray(cropped)), GridSpec(cell_px, rows, cols)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_probability: float = 0.5
    rotate_probability: float = 0.5


def augment(img: Image, cfg: AugmentConfig, rng: np.random.Generator) -> Image:
    """Geometric training augmentation: horizontal flip, then axis rotation.

    Each transform fires independently at its configured probability; the
    rotation angle is drawn uniformly from {90, 180, 270} only after its
    gate passes, so the rng draw sequence is the same for every image.
    Color content is never touched and samples are never re-normalized.
    """
    if not cfg.enabled:
        return img
    data = img.data
    if rng.random() < cfg.flip_probability:
        data = data[:, ::-1]
    if rng.random() < cfg.rotate_probability:
        quarter_turns = int(rng.integers(1, 4))
        data = np.rot90(data, k=quarter_turns, axes=(0, 1))
    if data is img.data:
        return img
    return Image(np.ascontiguousarray(data))


def prepare(
    img: Image,
    max_edge: int | None = None,
    augment_cfg: AugmentConfig | None = None,
    rng: np.random.Generator | None = None,
    max_edge_first: bool = True,
) -> Image:
    """Standard preprocessing order: max-edge cap, then augmentation.

    max_edge_first=False swaps the order for pipelines that want augmented
    geometry to drive the cap instead.
    """
    steps = []
    if max_edge is not None:
        steps.append(lambda im: max_edge_downscale(im, max_edge))
    if augment_cfg is not None:
        if rng is None:
            raise ValueError("augmentation requires an rng")
        steps.append(lambda im: augment(im, augment_cfg, rng))
    if not max_edge_first:
        steps.reverse()
    for step in steps:
        img = step(img)
    return img
