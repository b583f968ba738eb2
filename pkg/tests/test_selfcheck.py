"""Built-in consistency suites."""

import numpy as np

from charm.imaging import Image
from charm.importance import SelectionConfig
from charm.selfcheck import SUITES, coverage_complete, run_selfcheck
from charm.tokenizer import TokenizerConfig, tokenize


class TestRunSelfcheck:
    def test_all_suites_pass(self):
        results = run_selfcheck(seed=0)
        assert [r.name for r in results] == [name for name, _ in SUITES]
        failing = [r for r in results if not r.ok]
        assert failing == [], [f"{r.name}: {r.detail}" for r in failing]

    def test_seed_variation_still_passes(self):
        assert all(r.ok for r in run_selfcheck(seed=7))

    def test_injected_fault(self):
        results = run_selfcheck(seed=0, inject_fault=True)
        assert results[-1].name == "injected-fault"
        assert not results[-1].ok
        assert sum(1 for r in results if not r.ok) == 1


class TestCoverageComplete:
    def _pack(self):
        img = Image(np.random.default_rng(95).random((128, 128, 3), dtype=np.float32))
        cfg = TokenizerConfig(patch_size=16, n=2, target_len=40, max_edge=None,
                              selection=SelectionConfig(strategy="random"))
        return tokenize(img, cfg, np.random.default_rng(0)), cfg

    def test_accepts_lossless_pack(self):
        pack, cfg = self._pack()
        assert pack.meta["dropped"] == 0
        assert coverage_complete(pack, cfg)

    def test_rejects_missing_token(self):
        pack, cfg = self._pack()
        last = pack.valid_count - 1
        pack.valid_mask[last] = False
        pack.scale_ids[last] = 255
        pack.coords[last] = 0
        pack.pixels[last] = 0
        assert not coverage_complete(pack, cfg)

    def test_rejects_duplicated_token(self):
        pack, cfg = self._pack()
        # point the second token at the first token's grid cell
        sid = pack.scale_ids[0]
        idx = np.flatnonzero(pack.valid_mask & (pack.scale_ids == sid))
        pack.coords[idx[1]] = pack.coords[idx[0]]
        assert not coverage_complete(pack, cfg)
