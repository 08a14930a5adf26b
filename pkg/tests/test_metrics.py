import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madkit.adapters import init_adapter
from madkit.errors import ConfigError, DataError
from madkit.metrics import (
    ScoreConfig,
    append_result,
    accuracy_table,
    average_rank,
    budget,
    decathlon_score,
    hybrid_balance,
    mask_storage,
    read_results,
    score_rows,
    site_params,
)
from madkit.model import BackboneSpec, MultiDomainModel

from .oracles import average_rank_bruteforce

ALL_3X3 = BackboneSpec(stem_width=16, widths=(16, 16, 16), downsample=False)


class TestScore:
    @pytest.mark.parametrize("e_max", [0.1, 0.37, 0.8])
    def test_anchor_values(self, e_max):
        cfg = ScoreConfig({"d": e_max})
        assert decathlon_score({"d": e_max}, cfg).total == pytest.approx(0.0)
        assert decathlon_score({"d": e_max / 2}, cfg).total == pytest.approx(250.0)
        assert decathlon_score({"d": 0.0}, cfg).total == pytest.approx(1000.0)
        assert decathlon_score({"d": min(1.0, e_max * 1.2)}, cfg).total == 0.0

    def test_ten_domains_at_half_baseline(self):
        e = {f"d{i}": 0.05 + 0.05 * i for i in range(10)}
        res = decathlon_score({d: v / 2 for d, v in e.items()}, ScoreConfig(e))
        assert res.total == pytest.approx(2500.0)

    @settings(max_examples=200)
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.data())
    def test_monotone_in_each_error(self, e_max, data):
        cfg = ScoreConfig({f"d{i}": e for i, e in enumerate(e_max)})
        errs = {d: data.draw(st.floats(0.0, 1.0)) for d in cfg.e_max}
        d = data.draw(st.sampled_from(sorted(errs)))
        lower = dict(errs, **{d: errs[d] * data.draw(st.floats(0.0, 1.0))})
        assert decathlon_score(lower, cfg).total >= decathlon_score(errs, cfg).total

    def test_from_finetune(self):
        cfg = ScoreConfig.from_finetune_errors({"a": 0.1})
        assert cfg.e_max["a"] == pytest.approx(0.2)
        assert decathlon_score({"a": 0.1}, cfg).total == pytest.approx(250.0)

    def test_errors(self):
        with pytest.raises(ConfigError):
            ScoreConfig({"a": 0.0})
        with pytest.raises(ConfigError):
            decathlon_score({"b": 0.1}, ScoreConfig({"a": 0.2}))
        with pytest.raises(DataError):
            decathlon_score({"a": 1.5}, ScoreConfig({"a": 0.2}))


class TestBudget:
    def test_closed_forms(self):
        assert site_params("mad", 256, 256) == 65_536
        assert site_params("mad-fact", 256, 256, rank=36) == 18_432
        assert site_params("ra", 7, 3) == 49 and site_params("ba2", 7, 3) == 7

    @pytest.mark.parametrize("D", [1, 3, 10])
    def test_full_modulation_on_all_3x3(self, D):
        model = MultiDomainModel.initialize(ALL_3X3)
        for d in range(D):
            model.register_domain(f"d{d}", "mad", {}, 5)
        rep = budget(model)
        assert rep.relative_total == pytest.approx(1 + D / 9, rel=1e-12)
        assert rep.relative_including_bn > rep.relative_excluding_bn

    def test_heads_excluded_by_default(self):
        model = MultiDomainModel.initialize(ALL_3X3)
        model.register_domain("f", "feature", {}, 100)
        assert budget(model).relative_total == 1.0
        assert budget(model, include_heads=True).relative_total > 1.0

    def test_finetune_counts_a_full_copy(self):
        model = MultiDomainModel.initialize(ALL_3X3)
        model.register_domain("ft", "finetune", {}, 2)
        assert budget(model).relative_total == pytest.approx(2.0)

    def test_csv(self):
        model = MultiDomainModel.initialize(ALL_3X3)
        model.register_domain("a", "mad-fact", {"rank": 4, "rank_overflow": "full"}, 2)
        text = budget(model).to_csv()
        assert text.splitlines()[0] == "domain,kind,adapters,bn,head,mask_bits,relative"
        assert "TOTAL" in text

    def test_hybrid_balance_within_one_quantum(self):
        for M, N, rank in [(16, 16, 8), (32, 16, 13), (64, 64, 36)]:
            h = init_adapter("hybrid", (M, N, 3), rank=rank)
            assert hybrid_balance(h) <= M + N


class TestMaskStorage:
    @pytest.mark.parametrize("M,N,K", [(256, 256, 3), (3, 5, 1), (7, 7, 5)])
    def test_bits_and_bytes(self, M, N, K):
        s = mask_storage(init_adapter("mask", (M, N, K)))
        assert s.bits == M * N * K * K
        assert s.mask_bytes == -(-M * N * K * K // 8)
        assert s.total_bytes == s.mask_bytes + 8


class TestAverageRank:
    def test_hand_example_with_tie(self):
        table = {"a": {"x": 0.9, "y": 0.5}, "b": {"x": 0.9, "y": 0.7}, "c": {"x": 0.1, "y": 0.6}}
        assert average_rank(table) == {"a": 2.25, "b": 1.25, "c": 2.5}

    @settings(max_examples=100)
    @given(st.integers(2, 5), st.integers(1, 4), st.data())
    def test_matches_bruteforce(self, methods, domains, data):
        vals = st.sampled_from([0.1, 0.5, 0.7, 0.9])
        table = {f"m{i}": {f"d{j}": data.draw(vals) for j in range(domains)} for i in range(methods)}
        got, ref = average_rank(table), average_rank_bruteforce(table)
        assert got == pytest.approx(ref)
        assert sum(got.values()) == pytest.approx(methods * (methods + 1) / 2)


class TestResults:
    def test_jsonl_round_trip_and_scores(self, tmp_path):
        path = tmp_path / "r.jsonl"
        for method, dom, err in [("finetune", "a", 0.1), ("finetune", "b", 0.2), ("mad", "a", 0.05), ("mad", "b", 0.4)]:
            append_result(path, {"method": method, "domain": dom, "accuracy": 1 - err, "error": err,
                                 "params_abs": 1, "params_rel": 1.0})
        recs = read_results(path)
        assert len(recs) == 4
        rows = score_rows(recs)
        totals = {r["method"]: r["score"] for r in rows if r["domain"] == "TOTAL"}
        assert totals["finetune"] == pytest.approx(500.0)
        # a: e_max 0.2, err 0.05 -> 1000*(0.15/0.2)^2 = 562.5; b: err 0.4 > e_max -> 0
        assert totals["mad"] == pytest.approx(562.5)

    def test_json_list_input(self, tmp_path):
        path = tmp_path / "r.json"
        path.write_text(json.dumps([{"method": "x", "domain": "a", "accuracy": 0.8}]))
        recs = read_results(path)
        assert recs[0]["error"] == pytest.approx(0.2)
        assert accuracy_table(recs) == {"x": {"a": 0.8}}

    def test_incomplete_record(self, tmp_path):
        with pytest.raises(DataError):
            append_result(tmp_path / "r.jsonl", {"method": "x"})
        with pytest.raises(ConfigError):
            score_rows([{"method": "x", "domain": "a", "error": 0.1}])
