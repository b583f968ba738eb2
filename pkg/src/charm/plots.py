"""Report figures for the CLI (rendered headless to files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_COMPONENTS = ("patch_embed_macs", "projection_macs", "attention_macs", "mlp_macs")
_LABELS = ("patch embed", "projections", "attention", "mlp")


def save_cost_figure(report: dict, path) -> None:
    """Stacked GMAC bars, standard vs budgeted, from a cost_report dict."""
    sides = [("standard", report["standard"])]
    if "budgeted" in report:
        sides.append(("budgeted", report["budgeted"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(sides))
    bottom = np.zeros(len(sides))
    for comp, label in zip(_COMPONENTS, _LABELS):
        vals = np.array([s[comp] / 1e9 for _, s in sides])
        ax.bar(xs, vals, 0.55, bottom=bottom, label=label)
        bottom += vals
    for x, (name, s) in zip(xs, sides):
        ax.text(x, bottom[x] * 1.01, f"{s['gmacs']:.2f}G\n{s['token_count']} tok",
                ha="center", va="bottom", fontsize=9)
    ax.set_xticks(xs, [name for name, _ in sides])
    ax.set_ylabel("GMACs")
    ax.set_ylim(0, bottom.max() * 1.18)
    title = "encoder forward cost"
    if "reduction" in report:
        title += f" ({100 * report['reduction']['total']:.1f}% lower)"
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(pred: np.ndarray, gt: np.ndarray, report: dict, path) -> None:
    """Prediction-vs-label scatter annotated with the metric bundle."""
    fig, ax = plt.subplots(figsize=(5, 5))
    lo = float(min(pred.min(), gt.min()))
    hi = float(max(pred.max(), gt.max()))
    pad = 0.05 * (hi - lo or 1.0)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "--", color="gray", lw=1)
    ax.scatter(gt, pred, s=14, alpha=0.6)
    ax.set_xlabel("label score")
    ax.set_ylabel("predicted score")
    lines = [f"plcc {report['plcc']:.4f}", f"srcc {report['srcc']:.4f}",
             f"acc {report['acc']:.4f}", f"l1 {report['l1']:.4f}"]
    if "emd" in report:
        lines.append(f"emd {report['emd']:.4f}")
    ax.text(0.03, 0.97, "\n".join(lines), transform=ax.transAxes,
            va="top", fontsize=9, family="monospace",
            bbox={"boxstyle": "round", "fc": "white", "alpha": 0.8})
    ax.set_title(f"score agreement (n={report['count']})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_token_stats_figure(records: list[dict], path) -> None:
    """Histogram of valid-token counts across a tokenized batch."""
    counts = [r["valid"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(counts, bins=min(30, max(5, len(set(counts)))), color="#4878cf")
    ax.set_xlabel("valid tokens per image")
    ax.set_ylabel("images")
    ax.set_title(f"token usage over {len(records)} images (mean {np.mean(counts):.1f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
