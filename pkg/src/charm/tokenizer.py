"""Budget-constrained multi-scale tokenization and the pack file format.

An image is cut into a coarse cell grid; a token budget decides how many
cells keep full resolution (each becoming several base-size patches) while
the rest are bilinearly downscaled into fewer, coarser tokens. The result is
a fixed-length TokenPack: full-resolution tokens first, then progressively
downscaled ones, then zero pads, every token carrying its grid coordinates
and scale id.

Pack files ("CHRM") and their layout are documented in write_pack.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from ._util import atomic_write
from .imaging import Image, crop_to_grid, max_edge_downscale, resize_bilinear_array, seq_len
from .importance import (
    SCORED_STRATEGIES,
    ImportanceMap,
    SelectionConfig,
    load_saliency_map,
    score_cells,
    select_cells,
)

PACK_MAGIC = b"CHRM"
PACK_VERSION = 1
PAD_SCALE_ID = 255


class PackFormatError(ValueError):
    """Raised when pack bytes do not parse as a supported pack file."""


@dataclass(frozen=True)
class TokenizerConfig:
    """Tokenization parameters.

    patch_size is the base token side in pixels. Two-scale mode tokenizes on
    an (n * patch_size) grid; three-scale mode uses patch multipliers
    (alpha, beta, gamma) with gamma > beta > alpha >= 1 and grids on
    (gamma * patch_size) cells. target_len fixes the pack length.
    """

    patch_size: int = 16
    n: int = 2
    alpha: int = 2
    beta: int = 3
    gamma: int = 4
    target_len: int = 512
    scales: int = 2
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    max_edge: int | None = 1024

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.n < 2:
            raise ValueError("two-scale multiplier n must be >= 2")
        if not (self.gamma > self.beta > self.alpha >= 1):
            raise ValueError("need gamma > beta > alpha >= 1")
        if self.target_len < 1:
            raise ValueError("target_len must be >= 1")
        if self.scales not in (2, 3):
            raise ValueError("scales must be 2 or 3")
        if self.max_edge is not None and self.max_edge < 1:
            raise ValueError("max_edge must be >= 1 or None")

    @property
    def coarse_px(self) -> int:
        """Side of the selection grid cells in pixels."""
        mult = self.n if self.scales == 2 else self.gamma
        return mult * self.patch_size

    @property
    def downscale_ratio(self) -> float:
        """Linear size ratio applied to the most-downscaled cells."""
        return 1.0 / self.n if self.scales == 2 else self.alpha / self.gamma

    @property
    def downscale_fraction(self) -> float:
        """Fraction of linear size removed from the most-downscaled cells."""
        return 1.0 - self.downscale_ratio


@dataclass(frozen=True)
class SelectionPlan:
    """Cell budget for one image: k_full cells stay at full resolution,
    k_mid (three-scale only) go to the middle scale, the rest to the lowest."""

    k_full: int
    k_mid: int
    expected_tokens: int


class Token(NamedTuple):
    pixels: np.ndarray  # (p, p, c) float32
    scale_id: int
    row: int
    col: int


def plan_budget(cell_count: int, cfg: TokenizerConfig) -> SelectionPlan:
    """Derive per-scale cell counts that fill target_len as far as possible.

    Two-scale: each promoted cell trades 1 low-res token for n**2 full-res
    ones, so k = clamp((target_len - cells) // (n**2 - 1), 0, cells).
    Three-scale: the token surplus over the all-low baseline is split evenly
    between the full and middle scale upgrades.
    """
    if cell_count < 1:
        raise ValueError("cell_count must be >= 1")
    s, l = cell_count, cfg.target_len
    if cfg.scales == 2:
        gain = cfg.n * cfg.n - 1
        k = min(max((l - s) // gain, 0), s)
        return SelectionPlan(k, 0, s + k * gain)
    a2 = cfg.alpha * cfg.alpha
    b2 = cfg.beta * cfg.beta
    g2 = cfg.gamma * cfg.gamma
    surplus = l - a2 * s
    half = surplus // 2
    k_full = min(max(half // (g2 - a2), 0), s)
    k_mid = min(max(half // (b2 - a2), 0), s - k_full)
    return SelectionPlan(k_full, k_mid, a2 * s + k_full * (g2 - a2) + k_mid * (b2 - a2))


@dataclass
class TokenPack:
    """A fixed-length token sequence with per-token scale and grid location.

    Valid tokens come first, ordered by ascending scale_id; pad rows carry
    zero pixels, coords (0, 0), and scale_id PAD_SCALE_ID. grid_dims maps
    each scale_id to the (rows, cols) of the grid its coords live in.
    """

    patch_size: int
    channels: int
    pixels: np.ndarray
    scale_ids: np.ndarray
    coords: np.ndarray
    valid_mask: np.ndarray
    grid_dims: tuple[tuple[int, int], ...]
    meta: dict

    @property
    def length(self) -> int:
        return self.pixels.shape[0]

    @property
    def valid_count(self) -> int:
        return int(self.valid_mask.sum())

    def scale_counts(self) -> dict[int, int]:
        """Valid-token count per scale_id."""
        ids, counts = np.unique(self.scale_ids[self.valid_mask], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def validate(self) -> None:
        l, p, c = self.length, self.patch_size, self.channels
        if self.pixels.shape != (l, p, p, c) or self.pixels.dtype != np.float32:
            raise ValueError(f"bad pixels array {self.pixels.shape} {self.pixels.dtype}")
        if self.scale_ids.shape != (l,) or self.coords.shape != (l, 2):
            raise ValueError("scale_ids/coords shape mismatch")
        if self.valid_mask.shape != (l,) or self.valid_mask.dtype != np.bool_:
            raise ValueError("valid_mask shape/dtype mismatch")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite token pixels")
        mask = self.valid_mask
        if mask.size > 1 and np.any(~mask[:-1] & mask[1:]):
            raise ValueError("valid tokens must precede pads")
        vids = self.scale_ids[mask]
        if vids.size and (np.any(np.diff(vids.astype(np.int64)) < 0)):
            raise ValueError("valid tokens must be ordered by ascending scale_id")
        if np.any(vids >= len(self.grid_dims)):
            raise ValueError("scale_id outside grid_dims")
        for sid, (rows, cols) in enumerate(self.grid_dims):
            sel = mask & (self.scale_ids == sid)
            if np.any(self.coords[sel, 0] >= rows) or np.any(self.coords[sel, 1] >= cols):
                raise ValueError(f"coords outside grid for scale {sid}")
        pads = ~mask
        if np.any(self.scale_ids[pads] != PAD_SCALE_ID):
            raise ValueError("pad rows must use the pad scale sentinel")
        if np.any(self.coords[pads] != 0) or np.any(self.pixels[pads] != 0):
            raise ValueError("pad rows must be zeroed")


def pack_to_length(
    tokens: Sequence[Token],
    target_len: int,
    rng: np.random.Generator,
    *,
    grid_dims: Sequence[tuple[int, int]],
    meta: dict | None = None,
) -> TokenPack:
    """Pad or randomly thin an ordered token list to exactly target_len.

    Shorter lists get zero pads appended; longer ones lose tokens drawn
    uniformly at random from the most-downscaled scale first, walking down
    only when a scale is exhausted, so full-resolution content survives
    longest. The input ordering is preserved for survivors.
    """
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if not tokens:
        raise ValueError("empty token list")
    sid = np.asarray([t.scale_id for t in tokens], dtype=np.int64)
    if np.any(np.diff(sid) < 0):
        raise ValueError("token list must be ordered by ascending scale_id")

    dropped = 0
    kept = list(tokens)
    if len(kept) > target_len:
        keep = np.ones(sid.size, dtype=bool)
        need = sid.size - target_len
        for scale in np.unique(sid)[::-1]:
            if need <= 0:
                break
            pool = np.flatnonzero(sid == scale)
            m = min(need, pool.size)
            keep[rng.choice(pool, size=m, replace=False)] = False
            need -= m
        kept = [t for t, k in zip(kept, keep) if k]
        dropped = int(sid.size - len(kept))

    p = kept[0].pixels.shape[0]
    ch = kept[0].pixels.shape[2]
    pixels = np.zeros((target_len, p, p, ch), dtype=np.float32)
    scale_ids = np.full(target_len, PAD_SCALE_ID, dtype=np.uint8)
    coords = np.zeros((target_len, 2), dtype=np.uint32)
    valid = np.zeros(target_len, dtype=bool)
    for i, t in enumerate(kept):
        pixels[i] = t.pixels
        scale_ids[i] = t.scale_id
        coords[i] = (t.row, t.col)
        valid[i] = True

    out_meta = dict(meta or {})
    out_meta["dropped"] = dropped
    pack = TokenPack(
        patch_size=p,
        channels=ch,
        pixels=pixels,
        scale_ids=scale_ids,
        coords=coords,
        valid_mask=valid,
        grid_dims=tuple((int(r), int(c)) for r, c in grid_dims),
        meta=out_meta,
    )
    pack.validate()
    return pack


def _cell_tokens(cells: np.ndarray, cell_idx: np.ndarray, grid_cols: int, mult: int, p: int):
    """Split (N, mult*p, mult*p, ch) cells into row-major p-patches.

    Returns (N * mult**2, p, p, ch) patches plus their rows/cols in the
    mult-refined grid, ordered cell by cell.
    """
    n_cells, ch = cells.shape[0], cells.shape[-1]
    patches = (
        cells.reshape(n_cells, mult, p, mult, p, ch)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n_cells * mult * mult, p, p, ch)
    )
    rr = cell_idx // grid_cols
    cc = cell_idx % grid_cols
    ii, jj = np.meshgrid(np.arange(mult), np.arange(mult), indexing="ij")
    rows = (rr[:, None, None] * mult + ii[None]).reshape(-1)
    cols = (cc[:, None, None] * mult + jj[None]).reshape(-1)
    return np.ascontiguousarray(patches), rows, cols


def _split_cells(img: Image, grid) -> np.ndarray:
    cp = grid.cell_px
    return (
        img.data.reshape(grid.rows, cp, grid.cols, cp, img.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.cell_count, cp, cp, img.channels)
    )


def _resolve_map(
    cropped: Image,
    grid,
    cfg: TokenizerConfig,
    imap: ImportanceMap | None,
    saliency_path=None,
) -> ImportanceMap | None:
    strategy = cfg.selection.strategy
    if strategy == "random":
        return None
    if imap is not None:
        if (imap.grid.rows, imap.grid.cols, imap.grid.cell_px) != (
            grid.rows,
            grid.cols,
            grid.cell_px,
        ):
            raise ValueError(
                f"importance map grid {imap.grid} does not match image grid {grid}"
            )
        return imap
    if strategy == "saliency":
        if saliency_path is None:
            raise ValueError("saliency strategy needs a mask path or a precomputed map")
        return load_saliency_map(saliency_path, grid)
    assert strategy in SCORED_STRATEGIES
    return score_cells(cropped, grid, strategy)


def _append_tokens(out: list, patches, rows, cols, scale_id: int):
    for i in range(patches.shape[0]):
        out.append(Token(patches[i], scale_id, int(rows[i]), int(cols[i])))


def tokenize_single_scale(
    img: Image,
    cfg: TokenizerConfig,
    rng: np.random.Generator,
    meta: dict | None = None,
) -> TokenPack:
    """Plain patch tokenization at patch_size; every token is full scale."""
    cropped, grid = crop_to_grid(img, cfg.patch_size)
    cells = _split_cells(cropped, grid)
    patches, rows, cols = _cell_tokens(
        cells, np.arange(grid.cell_count), grid.cols, 1, cfg.patch_size
    )
    tokens: list[Token] = []
    _append_tokens(tokens, patches.astype(np.float32, copy=False), rows, cols, 0)
    return pack_to_length(
        tokens,
        cfg.target_len,
        rng,
        grid_dims=[(grid.rows, grid.cols)],
        meta=_with_shape_meta(meta, cfg, img, cropped, scales_used=1),
    )


def tokenize_two_scale(
    img: Image,
    cfg: TokenizerConfig,
    imap: ImportanceMap | None,
    rng: np.random.Generator,
    saliency_path=None,
    meta: dict | None = None,
) -> TokenPack:
    """Two-scale tokenization on an (n * patch_size) grid.

    Selected cells contribute n**2 full-resolution patches (scale 0); the
    rest are bilinearly downscaled to a single patch each (scale 1).
    """
    p, n = cfg.patch_size, cfg.n
    cropped, grid = crop_to_grid(img, cfg.coarse_px)
    plan = plan_budget(grid.cell_count, cfg)
    imap = _resolve_map(cropped, grid, cfg, imap, saliency_path)
    selected = select_cells(
        imap, plan.k_full, cfg.selection, rng, cell_count=grid.cell_count
    )
    sel_mask = np.zeros(grid.cell_count, dtype=bool)
    sel_mask[selected] = True
    cells = _split_cells(cropped, grid)

    tokens: list[Token] = []
    fine, rows, cols = _cell_tokens(cells[selected], selected, grid.cols, n, p)
    _append_tokens(tokens, fine, rows, cols, 0)
    unselected = np.flatnonzero(~sel_mask)
    low = resize_bilinear_array(cells[unselected], p, p)
    _append_tokens(tokens, low, unselected // grid.cols, unselected % grid.cols, 1)

    return pack_to_length(
        tokens,
        cfg.target_len,
        rng,
        grid_dims=[(grid.rows * n, grid.cols * n), (grid.rows, grid.cols)],
        meta=_with_shape_meta(meta, cfg, img, cropped, scales_used=2),
    )


def tokenize_three_scale(
    img: Image,
    cfg: TokenizerConfig,
    imaps: ImportanceMap | Sequence[ImportanceMap] | None,
    rng: np.random.Generator,
    saliency_path=None,
    meta: dict | None = None,
) -> TokenPack:
    """Three-scale tokenization on a (gamma * patch_size) grid.

    k_full cells keep full resolution (gamma**2 patches each, scale 0);
    of the rest, k_mid are downscaled to beta * patch_size (beta**2 patches,
    scale 1) and the remainder to alpha * patch_size (alpha**2 patches,
    scale 2). The second selection stage draws from unselected cells only;
    pass a pair of maps to score the two stages differently.
    """
    p = cfg.patch_size
    a, b, g = cfg.alpha, cfg.beta, cfg.gamma
    cropped, grid = crop_to_grid(img, cfg.coarse_px)
    plan = plan_budget(grid.cell_count, cfg)
    if imaps is None or isinstance(imaps, ImportanceMap):
        map1 = _resolve_map(cropped, grid, cfg, imaps, saliency_path)
        map2 = map1
    else:
        if len(imaps) != 2:
            raise ValueError("expected one importance map or a (stage1, stage2) pair")
        map1 = _resolve_map(cropped, grid, cfg, imaps[0], saliency_path)
        map2 = _resolve_map(cropped, grid, cfg, imaps[1], saliency_path)

    all_cells = np.arange(grid.cell_count)
    full_idx = select_cells(map1, plan.k_full, cfg.selection, rng, cell_count=grid.cell_count)
    remaining = np.setdiff1d(all_cells, full_idx, assume_unique=True)
    mid_idx = select_cells(map2, plan.k_mid, cfg.selection, rng, candidates=remaining)
    low_idx = np.setdiff1d(remaining, mid_idx, assume_unique=True)
    cells = _split_cells(cropped, grid)

    tokens: list[Token] = []
    fine, rows, cols = _cell_tokens(cells[full_idx], full_idx, grid.cols, g, p)
    _append_tokens(tokens, fine, rows, cols, 0)
    mid_cells = resize_bilinear_array(cells[mid_idx], b * p, b * p)
    mid, rows, cols = _cell_tokens(mid_cells, mid_idx, grid.cols, b, p)
    _append_tokens(tokens, mid, rows, cols, 1)
    low_cells = resize_bilinear_array(cells[low_idx], a * p, a * p)
    low, rows, cols = _cell_tokens(low_cells, low_idx, grid.cols, a, p)
    _append_tokens(tokens, low, rows, cols, 2)

    return pack_to_length(
        tokens,
        cfg.target_len,
        rng,
        grid_dims=[
            (grid.rows * g, grid.cols * g),
            (grid.rows * b, grid.cols * b),
            (grid.rows * a, grid.cols * a),
        ],
        meta=_with_shape_meta(meta, cfg, img, cropped, scales_used=3),
    )


def tokenize(
    img: Image,
    cfg: TokenizerConfig,
    rng: np.random.Generator,
    imap: ImportanceMap | Sequence[ImportanceMap] | None = None,
    saliency_path=None,
    meta: dict | None = None,
) -> TokenPack:
    """Full tokenization pipeline for one image.

    Applies the max-edge cap, then picks the scale mode: images whose plain
    patch count already fits target_len are tokenized single-scale; larger
    ones go through the configured two- or three-scale budgeting.
    """
    base_meta = dict(meta or {})
    base_meta.setdefault("input_size", [img.height, img.width])
    if cfg.max_edge is not None:
        img = max_edge_downscale(img, cfg.max_edge)
    if seq_len(img.height, img.width, cfg.patch_size) <= cfg.target_len:
        return tokenize_single_scale(img, cfg, rng, meta=base_meta)
    if cfg.scales == 2:
        single_map = imap if (imap is None or isinstance(imap, ImportanceMap)) else imap[0]
        return tokenize_two_scale(img, cfg, single_map, rng, saliency_path, meta=base_meta)
    return tokenize_three_scale(img, cfg, imap, rng, saliency_path, meta=base_meta)


def _with_shape_meta(meta, cfg: TokenizerConfig, img: Image, cropped: Image, scales_used: int):
    out = dict(meta or {})
    out.setdefault("input_size", [img.height, img.width])
    out["cropped_size"] = [cropped.height, cropped.width]
    out["scales_used"] = scales_used
    out["config"] = {
        "patch_size": cfg.patch_size,
        "n": cfg.n,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "gamma": cfg.gamma,
        "target_len": cfg.target_len,
        "scales": cfg.scales,
        "strategy": cfg.selection.strategy,
        "threshold_t": cfg.selection.threshold_t,
        "seed": cfg.selection.seed,
        "max_edge": cfg.max_edge,
    }
    return out


def write_pack(pack: TokenPack, path) -> None:
    """Serialize a pack to its binary file format, atomically.

    Little-endian layout:
        magic "CHRM" | u32 version | u32 length | u32 patch_size
        u32 channels | u32 num_scales | num_scales x (u32 rows, u32 cols)
        f32 pixels [length*p*p*channels] | u8 scale_ids [length]
        u32 coords [length*2] | u8 valid_mask [length]
        u32 meta_len | meta_len bytes of UTF-8 JSON

    The file is written to a temp sibling and renamed into place, so readers
    never observe a partial pack. Metadata JSON is canonical (sorted keys,
    compact separators), which makes write/read/write byte-stable.
    """
    pack.validate()
    parts = [
        struct.pack(
            "<4sIIIII",
            PACK_MAGIC,
            PACK_VERSION,
            pack.length,
            pack.patch_size,
            pack.channels,
            len(pack.grid_dims),
        )
    ]
    for rows, cols in pack.grid_dims:
        parts.append(struct.pack("<II", rows, cols))
    parts.append(np.ascontiguousarray(pack.pixels, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(pack.scale_ids, dtype=np.uint8).tobytes())
    parts.append(np.ascontiguousarray(pack.coords, dtype="<u4").tobytes())
    parts.append(pack.valid_mask.astype(np.uint8).tobytes())
    meta_json = json.dumps(pack.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_json)))
    parts.append(meta_json)

    atomic_write(path, b"".join(parts), prefix=".pack-")


def read_pack(path) -> TokenPack:
    """Parse a pack file; raises PackFormatError on any structural problem."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 24:
        raise PackFormatError("truncated pack header")
    magic, version, length, p, ch, num_scales = struct.unpack_from("<4sIIIII", buf, 0)
    if magic != PACK_MAGIC:
        raise PackFormatError(f"bad magic {magic!r}")
    if version != PACK_VERSION:
        raise PackFormatError(f"unsupported pack version {version}")
    off = 24
    if len(buf) < off + 8 * num_scales:
        raise PackFormatError("truncated grid dims")
    grid_dims = []
    for _ in range(num_scales):
        rows, cols = struct.unpack_from("<II", buf, off)
        grid_dims.append((rows, cols))
        off += 8

    def take(count, dtype, shape):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if len(buf) < off + nbytes:
            raise PackFormatError("truncated pack payload")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        return arr

    pixels = take(length * p * p * ch, "<f4", (length, p, p, ch)).astype(np.float32)
    scale_ids = take(length, np.uint8, (length,)).copy()
    coords = take(length * 2, "<u4", (length, 2)).astype(np.uint32)
    valid = take(length, np.uint8, (length,)).astype(bool)
    if len(buf) < off + 4:
        raise PackFormatError("truncated metadata length")
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) != off + meta_len:
        raise PackFormatError(
            f"pack length mismatch: expected {off + meta_len} bytes, file has {len(buf)}"
        )
    try:
        meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PackFormatError(f"bad metadata JSON: {exc}") from exc

    pack = TokenPack(
        patch_size=p,
        channels=ch,
        pixels=pixels,
        scale_ids=scale_ids,
        coords=coords,
        valid_mask=valid,
        grid_dims=tuple(grid_dims),
        meta=meta,
    )
    try:
        pack.validate()
    except ValueError as exc:
        raise PackFormatError(f"inconsistent pack: {exc}") from exc
    return pack
