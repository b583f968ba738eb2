"""Command-line interface.

Subcommands:
    tokenize   pack images in a file/directory into fixed-length token packs
    overlay    paint the selected full-resolution cells onto an image
    cost       forward-cost report for a backbone at a token budget
    metrics    score-agreement report between two prediction CSVs
    selfcheck  run the built-in consistency suites

The selection seed comes from --seed, falling back to the CHARM_SEED
environment variable, then 0. Every artifact the CLI writes echoes the seed
it was produced with.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo

from .cost import BACKBONE_PRESETS, cost_report
from .evaluation import aligned_scores, metric_report, read_scores_csv
from .imaging import crop_to_grid, load_image, max_edge_downscale, seq_len
from .importance import SelectionConfig, select_cells
from .selfcheck import run_selfcheck
from .tokenizer import TokenizerConfig, plan_budget, tokenize, write_pack
from .vit_core import ViTConfig

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("CHARM_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"CHARM_SEED is not an integer: {env!r}")
    return 0


def _add_tokenizer_flags(p: argparse.ArgumentParser):
    p.add_argument("--patch-size", type=int, default=16, help="base token side in pixels")
    p.add_argument("--n", type=int, default=2, help="two-scale grid multiplier")
    p.add_argument("--scales", type=int, choices=(2, 3), default=2)
    p.add_argument("--alpha", type=int, default=2, help="three-scale low multiplier")
    p.add_argument("--beta", type=int, default=3, help="three-scale mid multiplier")
    p.add_argument("--gamma", type=int, default=4, help="three-scale full multiplier")
    p.add_argument("--target-len", type=int, default=512, help="tokens per pack")
    p.add_argument(
        "--strategy",
        choices=("random", "frequency", "gradient", "entropy", "saliency"),
        default="frequency",
    )
    p.add_argument("--threshold-t", type=float, default=2.0,
                   help="candidate pool size as a multiple of the budget")
    p.add_argument("--seed", type=int, default=None,
                   help="selection seed (default: CHARM_SEED or 0)")
    p.add_argument("--max-edge", type=int, default=1024,
                   help="cap on the longer image edge; 0 disables")
    p.add_argument("--masks", type=Path, default=None,
                   help="directory of saliency masks named like their images")


def _tokenizer_config(args) -> TokenizerConfig:
    seed = _resolve_seed(args.seed)
    return TokenizerConfig(
        patch_size=args.patch_size,
        n=args.n,
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        target_len=args.target_len,
        scales=args.scales,
        selection=SelectionConfig(
            strategy=args.strategy, threshold_t=args.threshold_t, seed=seed
        ),
        max_edge=args.max_edge if args.max_edge else None,
    )


def _find_mask(masks_dir: Path, image_path: Path) -> Path:
    for suffix in IMAGE_SUFFIXES:
        candidate = masks_dir / (image_path.stem + suffix)
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no mask for {image_path.name} under {masks_dir}")


def _gather_inputs(target: Path) -> list[Path]:
    if target.is_dir():
        files = sorted(
            p for p in target.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise FileNotFoundError(f"no images under {target}")
        return files
    if target.is_file():
        return [target]
    raise FileNotFoundError(f"{target} does not exist")


def cmd_tokenize(args) -> int:
    cfg = _tokenizer_config(args)
    if args.strategy == "saliency" and args.masks is None:
        print("error: --strategy saliency requires --masks", file=sys.stderr)
        return 2
    try:
        inputs = _gather_inputs(args.input)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args.out_dir.mkdir(parents=True, exist_ok=True)

    def run_one(path: Path):
        img = load_image(path)
        saliency_path = _find_mask(args.masks, path) if args.strategy == "saliency" else None
        rng = cfg.selection.rng_for(path.name)
        pack = tokenize(
            img, cfg, rng, saliency_path=saliency_path,
            meta={"source": path.name, "seed": cfg.selection.seed},
        )
        out_path = args.out_dir / (path.stem + ".pack")
        write_pack(pack, out_path)
        return {
            "source": path.name,
            "pack": out_path.name,
            "valid": pack.valid_count,
            "pads": pack.length - pack.valid_count,
            "dropped": pack.meta["dropped"],
            "scales_used": pack.meta["scales_used"],
            "scale_counts": {str(k): v for k, v in pack.scale_counts().items()},
            "grid_dims": [list(g) for g in pack.grid_dims],
        }

    records, errors = {}, {}
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        futures = {pool.submit(run_one, p): p for p in inputs}
        for fut, path in futures.items():
            try:
                records[path] = fut.result()
            except Exception as exc:
                errors[path] = f"{type(exc).__name__}: {exc}"

    manifest = {
        "seed": cfg.selection.seed,
        "target_len": cfg.target_len,
        "strategy": cfg.selection.strategy,
        "images": [records[p] for p in inputs if p in records],
        "errors": [{"source": p.name, "error": errors[p]} for p in inputs if p in errors],
    }
    manifest_path = args.out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if args.figure and manifest["images"]:
        from .plots import save_token_stats_figure

        save_token_stats_figure(manifest["images"], args.figure)
    if args.json:
        print(json.dumps(manifest, indent=2, sort_keys=True))
    else:
        for rec in manifest["images"]:
            print(
                f"{rec['source']}: {rec['valid']} tokens "
                f"({rec['pads']} pads, {rec['dropped']} dropped) -> {rec['pack']}"
            )
        for err in manifest["errors"]:
            print(f"error: {err['source']}: {err['error']}", file=sys.stderr)
        print(f"wrote {manifest_path}")
    return 1 if errors else 0


_OUTLINE_COLORS = {0: (1.0, 0.0, 0.0), 1: (1.0, 0.65, 0.0)}


def _paint_outline(data: np.ndarray, r0: int, c0: int, side: int, color, width: int = 2):
    r1, c1 = r0 + side, c0 + side
    col = np.asarray(color, dtype=np.float32)
    data[r0 : r0 + width, c0:c1] = col
    data[r1 - width : r1, c0:c1] = col
    data[r0:r1, c0 : c0 + width] = col
    data[r0:r1, c1 - width : c1] = col


def cmd_overlay(args) -> int:
    cfg = _tokenizer_config(args)
    img = load_image(args.input)
    if cfg.max_edge is not None:
        img = max_edge_downscale(img, cfg.max_edge)
    rng = cfg.selection.rng_for(args.input.name)

    canvas = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    canvas = canvas.copy()
    note = None
    if seq_len(img.height, img.width, cfg.patch_size) <= cfg.target_len:
        note = "image fits the budget at full resolution; nothing to select"
    else:
        from .tokenizer import _resolve_map  # same map the tokenizer would use

        cropped, grid = crop_to_grid(img, cfg.coarse_px)
        saliency_path = None
        if cfg.selection.strategy == "saliency":
            if args.mask is None:
                print("error: --strategy saliency requires --mask", file=sys.stderr)
                return 2
            saliency_path = args.mask
        imap = _resolve_map(cropped, grid, cfg, None, saliency_path)
        plan = plan_budget(grid.cell_count, cfg)
        stages = [(plan.k_full, None)]
        if cfg.scales == 3 and plan.k_mid:
            stages.append((plan.k_mid, None))
        chosen_sets = []
        candidates = np.arange(grid.cell_count)
        for k, _ in stages:
            chosen = select_cells(imap, k, cfg.selection, rng, candidates=candidates)
            chosen_sets.append(chosen)
            candidates = np.setdiff1d(candidates, chosen, assume_unique=True)
        cp = cfg.coarse_px
        for stage, chosen in enumerate(chosen_sets):
            for idx in chosen:
                r, c = int(idx) // grid.cols, int(idx) % grid.cols
                _paint_outline(canvas, r * cp, c * cp, cp, _OUTLINE_COLORS[stage])

    info = PngInfo()
    info.add_text("charm:seed", str(cfg.selection.seed))
    info.add_text("charm:strategy", cfg.selection.strategy)
    out8 = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(out8, mode="RGB").save(args.out, format="PNG", pnginfo=info)
    if note:
        print(note)
    print(f"wrote {args.out}")
    return 0


def _vit_config(args) -> ViTConfig:
    if args.preset is not None:
        cfg = BACKBONE_PRESETS[args.preset]
    else:
        cfg = ViTConfig(embed_dim=384, layers=12, heads=6, patch_size=16)
    overrides = {}
    for field in ("embed_dim", "layers", "heads", "mlp_ratio"):
        v = getattr(args, field)
        if v is not None:
            overrides[field] = v
    if args.patch_size is not None:
        overrides["patch_size"] = args.patch_size
    return replace(cfg, **overrides) if overrides else cfg


def _format_cost_table(report: dict) -> str:
    rows = [("component", "standard", "budgeted", "reduction")]
    have_budget = "budgeted" in report
    for key, label in (
        ("token_count", "tokens"),
        ("patch_embed_macs", "patch embed"),
        ("projection_macs", "projections"),
        ("attention_macs", "attention"),
        ("mlp_macs", "mlp"),
        ("total_macs", "total"),
    ):
        std = report["standard"][key]
        bud = report["budgeted"][key] if have_budget else None

        def fmt(v):
            return f"{v}" if key == "token_count" else f"{v / 1e9:.3f}G"

        red = ""
        if have_budget and key != "token_count" and std:
            red = f"{100 * (1 - bud / std):.1f}%"
        rows.append((label, fmt(std), fmt(bud) if have_budget else "-", red))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows
    )


def cmd_cost(args) -> int:
    cfg = _vit_config(args)
    if args.standard_tokens is None and (args.height is None or args.width is None):
        print("error: need --height/--width or --standard-tokens", file=sys.stderr)
        return 2
    h = args.height if args.height is not None else 0
    w = args.width if args.width is not None else 0
    report = cost_report(
        cfg,
        h,
        w,
        budget_len=args.target_len,
        standard_tokens=args.standard_tokens,
    )
    if args.out:
        args.out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.figure:
        from .plots import save_cost_figure

        save_cost_figure(report, args.figure)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(_format_cost_table(report))
    return 0


def cmd_metrics(args) -> int:
    pred = read_scores_csv(args.pred)
    gt = read_scores_csv(args.gt)
    report = metric_report(pred, gt, acc_threshold=args.acc_threshold, emd_r=args.emd_r)
    if args.out:
        args.out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.figure:
        from .plots import save_metrics_figure

        p, g = aligned_scores(pred, gt)
        save_metrics_figure(p, g, report, args.figure)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        for key in ("count", "plcc", "srcc", "acc", "l1", "emd"):
            if key in report:
                v = report[key]
                print(f"{key:5s} {v:.6f}" if isinstance(v, float) else f"{key:5s} {v}")
    return 0


def cmd_selfcheck(args) -> int:
    seed = _resolve_seed(args.seed)
    results = run_selfcheck(seed=seed, inject_fault=args.inject_fault)
    print(f"selfcheck (seed {seed})")
    for r in results:
        if r.ok:
            print(f"PASS {r.name}")
        else:
            print(f"FAIL {r.name}: {r.detail}")
    failed = sum(1 for r in results if not r.ok)
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="charm", description="multi-scale image tokenization toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="tokenize images into pack files")
    p.add_argument("input", type=Path, help="image file or directory")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--workers", type=int, default=min(8, os.cpu_count() or 1))
    p.add_argument("--json", action="store_true", help="print the manifest to stdout")
    p.add_argument("--figure", type=Path, default=None,
                   help="also render a token-usage histogram PNG")
    _add_tokenizer_flags(p)
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("overlay", help="visualize selected full-resolution cells")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None, help="saliency mask for this image")
    _add_tokenizer_flags(p)
    p.set_defaults(fn=cmd_overlay)

    p = sub.add_parser("cost", help="forward-cost report")
    p.add_argument("--preset", choices=sorted(BACKBONE_PRESETS), default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--mlp-ratio", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--standard-tokens", type=int, default=None,
                   help="override the standard-side token count")
    p.add_argument("--target-len", type=int, default=None,
                   help="budgeted token count to compare against")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", type=Path, default=None, help="write the JSON report here")
    p.add_argument("--figure", type=Path, default=None, help="render a cost figure PNG")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("metrics", help="score-agreement metrics between two CSVs")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--acc-threshold", type=float, default=5.0)
    p.add_argument("--emd-r", type=float, default=2.0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--figure", type=Path, default=None, help="render a scatter PNG")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("selfcheck", help="run the built-in consistency suites")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
