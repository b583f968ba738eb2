"""Multiply-accumulate cost model for transformer encoders.

Counts MACs (one fused multiply-add) for a standard pre-norm ViT forward
pass as a function of token count: the patch projection, then per layer the
four d x d projections (QKV + output), the two L x L attention matmuls, and
the two MLP matmuls, with L including the CLS token. Good enough to compare
tokenization budgets; ignores norms, softmax, and activations.
"""

from __future__ import annotations

from dataclasses import dataclass

from .imaging import seq_len
from .vit_core import ViTConfig

# Published encoder geometries, keyed by the names the CLI accepts.
BACKBONE_PRESETS: dict[str, ViTConfig] = {
    "vit-small": ViTConfig(embed_dim=384, layers=12, heads=6, patch_size=16),
    "dinov2-small": ViTConfig(embed_dim=384, layers=12, heads=6, patch_size=14),
    "dinov2-base": ViTConfig(embed_dim=768, layers=12, heads=12, patch_size=14),
    "dinov2-large": ViTConfig(embed_dim=1024, layers=24, heads=16, patch_size=14),
}


@dataclass(frozen=True)
class CostBreakdown:
    """MAC counts for one forward pass at a fixed token count."""

    token_count: int
    patch_embed_macs: int
    projection_macs: int
    attention_macs: int
    mlp_macs: int

    @property
    def total_macs(self) -> int:
        return (
            self.patch_embed_macs
            + self.projection_macs
            + self.attention_macs
            + self.mlp_macs
        )

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def as_dict(self) -> dict:
        return {
            "token_count": self.token_count,
            "patch_embed_macs": self.patch_embed_macs,
            "projection_macs": self.projection_macs,
            "attention_macs": self.attention_macs,
            "mlp_macs": self.mlp_macs,
            "total_macs": self.total_macs,
            "gmacs": self.gmacs,
        }


def vit_macs(cfg: ViTConfig, n_tokens: int) -> CostBreakdown:
    """MACs for a forward pass over n_tokens patch tokens plus CLS."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    d = cfg.embed_dim
    L = n_tokens + 1
    patch_embed = n_tokens * (cfg.patch_size * cfg.patch_size * cfg.channels) * d
    projections = 4 * L * d * d
    attention = 2 * L * L * d
    mlp = 2 * L * d * (cfg.mlp_ratio * d)
    return CostBreakdown(
        token_count=n_tokens,
        patch_embed_macs=patch_embed,
        projection_macs=cfg.layers * projections,
        attention_macs=cfg.layers * attention,
        mlp_macs=cfg.layers * mlp,
    )


def cost_report(
    cfg: ViTConfig,
    height: int,
    width: int,
    budget_len: int | None = None,
    standard_tokens: int | None = None,
) -> dict:
    """Compare the plain-tokenization cost against a fixed token budget.

    The standard side uses seq_len(height, width, patch_size) unless
    standard_tokens overrides it (published tables sometimes count tokens
    from a slightly different preprocessing). With budget_len set, the
    report adds the budgeted side and per-component reduction fractions.
    """
    std_tokens = standard_tokens if standard_tokens is not None else seq_len(
        height, width, cfg.patch_size
    )
    standard = vit_macs(cfg, std_tokens)
    report = {
        "input_size": [height, width],
        "encoder": {
            "embed_dim": cfg.embed_dim,
            "layers": cfg.layers,
            "heads": cfg.heads,
            "mlp_ratio": cfg.mlp_ratio,
            "patch_size": cfg.patch_size,
            "channels": cfg.channels,
        },
        "standard": standard.as_dict(),
    }
    if budget_len is not None:
        budgeted = vit_macs(cfg, budget_len)
        report["budgeted"] = budgeted.as_dict()
        report["reduction"] = {
            "total": 1.0 - budgeted.total_macs / standard.total_macs,
            "attention": 1.0 - budgeted.attention_macs / standard.attention_macs,
            "projection": 1.0 - budgeted.projection_macs / standard.projection_macs,
            "mlp": 1.0 - budgeted.mlp_macs / standard.mlp_macs,
        }
    return report


def suggest_len(avg_tokens: float, candidates=(196, 256, 512, 768, 1024, 1600)) -> int:
    """Closest candidate budget to an observed average token count.

    Ties break toward the smaller budget.
    """
    if not candidates:
        raise ValueError("no candidates")
    return min(candidates, key=lambda c: (abs(c - avg_tokens), c))
