"""In-process consistency suites behind the `charm selfcheck` command.

Each suite re-derives an arithmetic fact or an invariant the library is
supposed to uphold and reports pass/fail; together they catch regressions
in budgeting, packing geometry, masking, interpolation, and serialization
without needing any external data. The acceptance test suite covers the
same ground with independent oracles and larger trial counts; these are
sized to run in a few seconds on a laptop.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, vit_core
from .cost import BACKBONE_PRESETS, vit_macs
from .embeddings import interpolate_grid, synthetic_pos_grid
from .imaging import GridSpec, Image, seq_len
from .importance import ImportanceMap, SelectionConfig, score_cells, select_cells
from .tokenizer import (
    TokenizerConfig,
    read_pack,
    tokenize,
    tokenize_single_scale,
    tokenize_two_scale,
    write_pack,
)

# Published forward-cost figures for the preset backbones, used as anchor
# points: (preset, token count, GMACs).
REFERENCE_COSTS = (
    ("dinov2-small", 256, 6.11),
    ("dinov2-small", 512, 13.46),
    ("dinov2-small", 700, 19.60),
    ("vit-small", 196, 4.58),
    ("vit-small", 1600, 58.11),
)
REFERENCE_REDUCTIONS = (
    # (preset, standard tokens, budget, expected reduction)
    ("dinov2-small", 2070, 512, 0.840),
    ("dinov2-small", 2070, 700, 0.767),
)


@dataclass(frozen=True)
class SuiteResult:
    name: str
    ok: bool
    detail: str = ""


def _random_image(rng, h, w, channels=3) -> Image:
    return Image(rng.random((h, w, channels), dtype=np.float32))


def _scale_multipliers(cfg: TokenizerConfig, scales_used: int) -> tuple[int, ...]:
    if scales_used == 1:
        return (1,)
    if scales_used == 2:
        return (cfg.n, 1)
    return (cfg.gamma, cfg.beta, cfg.alpha)


def _sorted_token_rows(pack) -> np.ndarray:
    rows = pack.pixels[pack.valid_mask].reshape(pack.valid_count, -1)
    order = np.lexsort(rows.T[::-1])
    return rows[order]


def coverage_complete(pack, cfg: TokenizerConfig) -> bool:
    """True if valid tokens tile every coarse cell exactly once.

    Each coarse cell must be claimed by exactly one scale, with that scale's
    full complement of patches, each offset appearing once. Packs that
    dropped tokens cannot tile and always fail this test.
    """
    mults = _scale_multipliers(cfg, pack.meta["scales_used"])
    rows_g = pack.grid_dims[0][0] // mults[0]
    cols_g = pack.grid_dims[0][1] // mults[0]
    seen: dict[tuple[int, int], set] = {}
    for i in np.flatnonzero(pack.valid_mask):
        sid = int(pack.scale_ids[i])
        m = mults[sid]
        r, c = int(pack.coords[i, 0]), int(pack.coords[i, 1])
        entry = (sid, r % m, c % m)
        cell = seen.setdefault((r // m, c // m), set())
        if entry in cell:
            return False
        cell.add(entry)
    if len(seen) != rows_g * cols_g:
        return False
    for cell in seen.values():
        scales = {s for s, _, _ in cell}
        if len(scales) != 1:
            return False
        m = mults[next(iter(scales))]
        if len(cell) != m * m:
            return False
    return True


def _check_token_counts(seed: int) -> str:
    table = (((224, 224, 16), 196), ((224, 224, 14), 256), ((640, 640, 16), 1600))
    for (h, w, p), want in table:
        got = seq_len(h, w, p)
        if got != want:
            return f"seq_len{(h, w, p)} = {got}, expected {want}"
    return ""


def _check_gmac_table(seed: int) -> str:
    for preset, tokens, want in REFERENCE_COSTS:
        got = vit_macs(BACKBONE_PRESETS[preset], tokens).gmacs
        if abs(got - want) / want > 0.02:
            return f"{preset}@{tokens}: {got:.3f} GMACs vs published {want}"
    return ""


def _check_reductions(seed: int) -> str:
    for preset, std, budget, want in REFERENCE_REDUCTIONS:
        cfg = BACKBONE_PRESETS[preset]
        got = 1.0 - vit_macs(cfg, budget).total_macs / vit_macs(cfg, std).total_macs
        if abs(got - want) > 0.01:
            return f"{preset} {std}->{budget}: reduction {got:.4f} vs {want}"
    return ""


def _check_budget_packing(seed: int) -> str:
    rng = np.random.default_rng(seed)
    img = _random_image(rng, 640, 640)
    for strategy in ("random", "frequency", "gradient", "entropy", "saliency"):
        cfg = TokenizerConfig(
            patch_size=16, n=2, target_len=512, scales=2,
            selection=SelectionConfig(strategy=strategy, seed=seed),
        )
        imap = None
        if strategy == "saliency":
            imap = ImportanceMap(GridSpec(32, 20, 20), rng.random(400))
        pack = tokenize(img, cfg, np.random.default_rng(seed), imap=imap)
        counts = pack.scale_counts()
        got = (pack.valid_count, counts.get(0, 0), counts.get(1, 0))
        if got != (511, 148, 363):
            return f"{strategy}: (valid, full, low) = {got}, expected (511, 148, 363)"
        if not coverage_complete(pack, cfg):
            return f"{strategy}: pack does not tile its crop"
    return ""


def _check_tiling(seed: int, trials: int = 20) -> str:
    rng = np.random.default_rng(seed)
    for i in range(trials):
        scales = int(rng.choice([2, 3]))
        p = int(rng.choice([8, 16]))
        cfg = TokenizerConfig(
            patch_size=p, n=2, scales=scales, target_len=int(rng.integers(64, 700)),
            selection=SelectionConfig(strategy="random", seed=seed + i),
            max_edge=None,
        )
        h = int(rng.integers(cfg.coarse_px, 520))
        w = int(rng.integers(cfg.coarse_px, 520))
        pack = tokenize(_random_image(rng, h, w), cfg, np.random.default_rng(i))
        if pack.meta["dropped"]:
            continue
        if not coverage_complete(pack, cfg):
            return f"trial {i}: pack ({h}x{w}, p={p}, scales={scales}) does not tile"
    return ""


def _check_degenerate(seed: int, trials: int = 10) -> str:
    rng = np.random.default_rng(seed)
    for i in range(trials):
        p, n = 8, 2
        rows, cols = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        img = _random_image(rng, rows * n * p, cols * n * p)
        cfg = TokenizerConfig(
            patch_size=p, n=n, scales=2, target_len=rows * cols * n * n,
            selection=SelectionConfig(strategy="random", seed=i), max_edge=None,
        )
        # force the two-scale path: with a full budget it must degenerate
        multi = tokenize_two_scale(img, cfg, None, np.random.default_rng(i))
        single = tokenize_single_scale(img, cfg, np.random.default_rng(i))
        if multi.valid_count != single.valid_count:
            return f"trial {i}: token counts differ"
        if not np.array_equal(_sorted_token_rows(multi), _sorted_token_rows(single)):
            return f"trial {i}: full-selection pack differs from single-scale"
    return ""


def _toy_setup(seed: int, target_len: int = 48):
    rng = np.random.default_rng(seed)
    cfg = TokenizerConfig(
        patch_size=8, n=2, target_len=target_len, scales=2,
        selection=SelectionConfig(strategy="random", seed=seed), max_edge=None,
    )
    img = _random_image(rng, 96, 96)
    pack = tokenize(img, cfg, rng)
    vcfg = vit_core.ViTConfig(embed_dim=32, layers=2, heads=4, patch_size=8)
    weights = vit_core.init_weights(vcfg, 12, 12, num_scales=2, seed=seed)
    return pack, weights, vcfg


def _assembled(pack, weights):
    encoded = vit_core.patch_encode(pack, weights)
    pos = vit_core.position_for_tokens(pack, weights.pos_grid())
    sc = vit_core.scale_embed(pack, weights.embedding_table())
    return vit_core.assemble_input(encoded, pos, sc, pack.valid_mask, weights)


def _check_permutation(seed: int, trials: int = 10) -> str:
    pack, weights, vcfg = _toy_setup(seed)
    seq, key_mask = _assembled(pack, weights)
    base = vit_core.encoder_forward(seq, key_mask, weights, vcfg)[0]
    rng = np.random.default_rng(seed)
    for i in range(trials):
        perm = rng.permutation(pack.length)
        seq2 = np.vstack([seq[:1], seq[1:][perm]])
        mask2 = np.concatenate([[True], key_mask[1:][perm]])
        out = vit_core.encoder_forward(seq2, mask2, weights, vcfg)[0]
        rel = np.max(np.abs(out - base)) / max(np.max(np.abs(base)), 1e-12)
        if rel > 1e-5:
            return f"perm {i}: CLS deviates by {rel:.2e} (> 1e-5)"
    return ""


def _check_pad_neutrality(seed: int, trials: int = 10) -> str:
    rng = np.random.default_rng(seed)
    for i in range(trials):
        pack, weights, vcfg = _toy_setup(seed + i)
        seq, key_mask = _assembled(pack, weights)
        base = vit_core.encoder_forward(seq, key_mask, weights, vcfg)[0]
        extra = int(rng.integers(1, 65))
        mask_row = weights["scales.mask"].astype(np.float64)
        seq2 = np.vstack([seq, np.tile(mask_row, (extra, 1))])
        mask2 = np.concatenate([key_mask, np.zeros(extra, dtype=bool)])
        out = vit_core.encoder_forward(seq2, mask2, weights, vcfg)[0]
        rel = np.max(np.abs(out - base)) / max(np.max(np.abs(base)), 1e-12)
        if rel > 1e-6:
            return f"trial {i}: {extra} pads move CLS by {rel:.2e} (> 1e-6)"
    return ""


def _check_interpolation(seed: int, trials: int = 20) -> str:
    rng = np.random.default_rng(seed)
    for i in range(trials):
        rows, cols, dim = int(rng.integers(2, 24)), int(rng.integers(2, 24)), 8
        src = synthetic_pos_grid(rows, cols, dim, seed=i)
        same = interpolate_grid(src, rows, cols)
        if not np.array_equal(same, src.grid):
            return f"trial {i}: identity interpolation is not bit-exact"
        tr, tc = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        out = interpolate_grid(src, tr, tc)
        lo = src.grid.min(axis=(0, 1))
        hi = src.grid.max(axis=(0, 1))
        if np.any(out < lo) or np.any(out > hi):
            return f"trial {i}: interpolation left the source range"
    return ""


def _check_metric_identities(seed: int) -> str:
    x = np.array([1.0, 2.0, 3.0, 5.0, 8.0])
    checks = [
        (abs(evaluation.plcc(2.0 * x + 1.0, x) - 1.0) <= 1e-9, "plcc affine"),
        (abs(evaluation.srcc(x**3, x) - 1.0) <= 1e-9, "srcc monotone"),
        (evaluation.acc(x, x) == 1.0, "acc identity"),
        (abs(evaluation.plcc([1, 2, 3], [1, 3, 2]) - 0.5) <= 1e-9, "plcc hand case"),
        (abs(evaluation.srcc([1, 2, 2, 4], [1, 2, 3, 4]) - 0.9486832980505138) <= 1e-9,
         "srcc tie hand case"),
    ]
    bins = np.array([1.0, 2.0])
    d1 = evaluation.ScoreDistribution(np.array([1.0, 0.0]), bins)
    d2 = evaluation.ScoreDistribution(np.array([0.0, 1.0]), bins)
    checks.append(
        (abs(evaluation.emd_loss(d1, d2) - np.sqrt(0.5)) <= 1e-9, "emd hand case")
    )
    checks.append((evaluation.emd_loss(d1, d1) == 0.0, "emd identity"))
    for ok, name in checks:
        if not ok:
            return f"metric identity failed: {name}"
    return ""


def _check_selection(seed: int, trials: int = 100) -> str:
    rng = np.random.default_rng(seed)
    for i in range(trials):
        cells = int(rng.integers(4, 80))
        scores = rng.random(cells)
        imap = ImportanceMap(GridSpec(1, 1, cells), scores)
        k = int(rng.integers(1, cells + 1))
        ranked = np.lexsort((np.arange(cells), -scores))
        top = select_cells(imap, k, SelectionConfig(strategy="frequency", threshold_t=1.0),
                           np.random.default_rng(i))
        if not np.array_equal(top, np.sort(ranked[:k])):
            return f"trial {i}: t=1 selection differs from brute-force top-k"
        pool = set(ranked[: min(int(np.ceil(2.0 * k)), cells)].tolist())
        drawn = select_cells(imap, k, SelectionConfig(strategy="frequency", threshold_t=2.0),
                             np.random.default_rng(i))
        if not set(drawn.tolist()) <= pool:
            return f"trial {i}: t=2 selection left the candidate pool"
    return ""


def _check_discrimination(seed: int, trials: int = 20) -> str:
    rng = np.random.default_rng(seed)
    h = w = 320
    img_data = np.full((h, w, 3), 0.5, dtype=np.float32)
    img_data[:, w // 2 :] = rng.random((h, w // 2, 3), dtype=np.float32)
    img = Image(img_data)
    grid = GridSpec(32, 10, 10)
    k = 25
    for strategy in ("frequency", "gradient", "entropy"):
        imap = score_cells(img, grid, strategy)
        hits = total = 0
        for s in range(trials):
            chosen = select_cells(
                imap, k, SelectionConfig(strategy=strategy, threshold_t=2.0),
                np.random.default_rng(seed + s),
            )
            hits += int((chosen % 10 >= 5).sum())
            total += k
        if hits / total < 0.9:
            return f"{strategy}: only {hits / total:.2%} of picks in the textured half"
    return ""


def _check_serialization(seed: int, trials: int = 10) -> str:
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as td:
        td = Path(td)
        for i in range(trials):
            h = int(rng.integers(48, 160))
            w = int(rng.integers(48, 160))
            cfg = TokenizerConfig(
                patch_size=8, n=2, target_len=int(rng.integers(32, 128)),
                selection=SelectionConfig(strategy="random", seed=i), max_edge=None,
            )
            pack = tokenize(_random_image(rng, h, w), cfg, np.random.default_rng(i))
            path = td / f"p{i}.pack"
            write_pack(pack, path)
            first = path.read_bytes()
            again = td / f"p{i}b.pack"
            write_pack(read_pack(path), again)
            if first != again.read_bytes():
                return f"trial {i}: pack bytes changed across a read/write cycle"
        vcfg = vit_core.ViTConfig(embed_dim=16, layers=1, heads=2, patch_size=8)
        wts = vit_core.init_weights(vcfg, 4, 4, num_scales=2, seed=seed)
        wp = td / "w.weights"
        vit_core.save_weights(wts, wp)
        first = wp.read_bytes()
        wp2 = td / "w2.weights"
        vit_core.save_weights(vit_core.load_weights(wp), wp2)
        if first != wp2.read_bytes():
            return "weights bytes changed across a read/write cycle"
    return ""


SUITES = (
    ("token-count-arithmetic", _check_token_counts),
    ("gmac-table", _check_gmac_table),
    ("reduction-percentages", _check_reductions),
    ("budget-packing", _check_budget_packing),
    ("tiling", _check_tiling),
    ("degenerate-equivalence", _check_degenerate),
    ("permutation-invariance", _check_permutation),
    ("pad-neutrality", _check_pad_neutrality),
    ("pos-embed-interpolation", _check_interpolation),
    ("metric-identities", _check_metric_identities),
    ("selection-correctness", _check_selection),
    ("synthetic-discrimination", _check_discrimination),
    ("serialization", _check_serialization),
)


def run_selfcheck(seed: int = 0, inject_fault: bool = False) -> list[SuiteResult]:
    results = []
    for name, fn in SUITES:
        try:
            detail = fn(seed)
        except Exception as exc:  # a crashed suite is a failed suite
            detail = f"raised {type(exc).__name__}: {exc}"
        results.append(SuiteResult(name, not detail, detail))
    if inject_fault:
        results.append(SuiteResult("injected-fault", False, "fault injection requested"))
    return results
