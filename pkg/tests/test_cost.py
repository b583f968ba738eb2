"""Transformer MAC model and budget comparisons."""

import pytest

from charm.cost import BACKBONE_PRESETS, CostBreakdown, cost_report, suggest_len, vit_macs
from charm.vit_core import ViTConfig


def macs_oracle(cfg, n_tokens):
    """Independent recount, matmul by matmul."""
    d, L = cfg.embed_dim, n_tokens + 1
    total = n_tokens * cfg.patch_size * cfg.patch_size * cfg.channels * d
    per_layer = 0
    per_layer += 3 * L * d * d              # q, k, v projections
    per_layer += L * d * d                  # attention output projection
    per_layer += L * L * d                  # q @ k^T
    per_layer += L * L * d                  # weights @ v
    per_layer += L * d * (cfg.mlp_ratio * d)  # mlp up
    per_layer += L * (cfg.mlp_ratio * d) * d  # mlp down
    return total + cfg.layers * per_layer


class TestVitMacs:
    def test_matches_oracle(self):
        for name, cfg in BACKBONE_PRESETS.items():
            for n in (49, 196, 512, 2070):
                assert vit_macs(cfg, n).total_macs == macs_oracle(cfg, n), name

    def test_reference_gmacs(self):
        """Published forward costs, all within 2 percent."""
        dinov2 = BACKBONE_PRESETS["dinov2-small"]
        vit = BACKBONE_PRESETS["vit-small"]
        for cfg, tokens, gmacs in (
            (dinov2, 256, 6.11),
            (dinov2, 512, 13.46),
            (dinov2, 700, 19.60),
            (vit, 196, 4.58),
            (vit, 1600, 58.11),
        ):
            assert vit_macs(cfg, tokens).gmacs == pytest.approx(gmacs, rel=0.02)

    def test_total_is_sum_of_parts(self):
        bd = vit_macs(BACKBONE_PRESETS["dinov2-base"], 300)
        assert bd.total_macs == (bd.patch_embed_macs + bd.projection_macs
                                 + bd.attention_macs + bd.mlp_macs)
        assert bd.gmacs == bd.total_macs / 1e9

    def test_as_dict_round_numbers(self):
        bd = vit_macs(ViTConfig(embed_dim=4, layers=1, heads=1, patch_size=2,
                                channels=1, mlp_ratio=2), 2)
        d = bd.as_dict()
        # patch embed: 2 tokens * 4 pixels * 4 dims = 32
        assert d["patch_embed_macs"] == 32
        # projections: 4 * 3 * 16 = 192; attention: 2 * 9 * 4 = 72; mlp: 2 * 3 * 4 * 8 = 192
        assert d["projection_macs"] == 192
        assert d["attention_macs"] == 72
        assert d["mlp_macs"] == 192
        assert d["total_macs"] == 488

    def test_monotone_in_tokens(self):
        cfg = BACKBONE_PRESETS["vit-small"]
        costs = [vit_macs(cfg, n).total_macs for n in (10, 100, 1000)]
        assert costs[0] < costs[1] < costs[2]

    def test_rejects_empty_sequence(self):
        with pytest.raises(ValueError):
            vit_macs(BACKBONE_PRESETS["vit-small"], 0)


class TestPresets:
    def test_geometries(self):
        assert BACKBONE_PRESETS["vit-small"].embed_dim == 384
        assert BACKBONE_PRESETS["vit-small"].patch_size == 16
        assert BACKBONE_PRESETS["dinov2-small"].patch_size == 14
        assert BACKBONE_PRESETS["dinov2-base"].embed_dim == 768
        assert BACKBONE_PRESETS["dinov2-large"].layers == 24
        for cfg in BACKBONE_PRESETS.values():
            assert cfg.mlp_ratio == 4
            assert cfg.channels == 3


class TestCostReport:
    def test_standard_side_from_dims(self):
        cfg = BACKBONE_PRESETS["vit-small"]
        report = cost_report(cfg, 224, 224)
        assert report["standard"]["token_count"] == 196
        assert "budgeted" not in report

    def test_standard_tokens_override(self):
        cfg = BACKBONE_PRESETS["dinov2-small"]
        report = cost_report(cfg, 224, 224, standard_tokens=2070)
        assert report["standard"]["token_count"] == 2070

    def test_reduction_fractions(self):
        cfg = BACKBONE_PRESETS["dinov2-small"]
        report = cost_report(cfg, 0, 0, budget_len=512, standard_tokens=2070)
        std = vit_macs(cfg, 2070)
        bud = vit_macs(cfg, 512)
        red = report["reduction"]
        assert red["total"] == pytest.approx(1 - bud.total_macs / std.total_macs)
        assert red["attention"] == pytest.approx(1 - bud.attention_macs / std.attention_macs)
        assert red["total"] == pytest.approx(0.84, abs=0.01)

    def test_reference_reduction_700(self):
        cfg = BACKBONE_PRESETS["dinov2-small"]
        report = cost_report(cfg, 0, 0, budget_len=700, standard_tokens=2070)
        assert report["reduction"]["total"] == pytest.approx(0.767, abs=0.01)

    def test_encoder_echo(self):
        report = cost_report(BACKBONE_PRESETS["dinov2-base"], 280, 280)
        assert report["encoder"]["embed_dim"] == 768
        assert report["input_size"] == [280, 280]


class TestSuggestLen:
    def test_average_snaps_to_candidate(self):
        assert suggest_len(1090.0) == 1024
        assert suggest_len(300.0) == 256
        assert suggest_len(1500.0) == 1600

    def test_tie_prefers_smaller(self):
        assert suggest_len(226.0) == 196

    def test_custom_candidates(self):
        assert suggest_len(45.0, candidates=(16, 64)) == 64
        assert suggest_len(40.0, candidates=(16, 64)) == 16  # equidistant tie

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            suggest_len(100.0, candidates=())
