import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rector.ann import auto_k
from rector.evaluate import (
    BenchError,
    EmbeddingSet,
    RocPoint,
    ScenarioError,
    SweepError,
    build_scenario,
    dominance_violations,
    dominates,
    evaluate,
    load_embeddings,
    loglog_slope,
    match_ann,
    match_pairwise,
    n_true_pairs,
    random_baseline,
    roc_sweep,
    save_embeddings,
    save_report,
    save_scaling,
    scaling_bench,
    scenario_index,
    synthetic_scenario,
    tpr_at_fpr,
)
from rector.rng import derive
from rector.traffic import Dataset, FlowTrace, PacketRecord

import reference as ref


def embedding_pool(n_sessions, D=8, seed=0, noise=0.2, missing=0):
    """Sessions with correlated ingress/egress vectors; the last ``missing``
    sessions have only an ingress flow."""
    rng = derive(seed, "pool")
    base = rng.normal(size=(n_sessions, D))
    ids, roles, sess, vecs = [], [], [], []
    for s in range(n_sessions):
        for role in ("ingress", "egress"):
            if role == "egress" and s >= n_sessions - missing:
                continue
            v = base[s] + noise * rng.normal(size=D)
            ids.append(f"s{s:04d}_{role[:2]}")
            roles.append(role)
            sess.append(f"s{s:04d}")
            vecs.append(v / np.linalg.norm(v))
    return EmbeddingSet(ids, roles, sess, np.array(vecs))


class TestScenario:
    def test_full_mapping(self):
        sc = build_scenario(None, embedding_pool(60), 50, 50, 1.0, seed=1)
        assert len(sc.true_pairs) == 50 and sc.sigma == 1.0
        assert sc.accounting() == {"true_pairs": 50, "unmatched_ingress": 0, "unmatched_egress": 0, "N": 50, "M": 50}

    def test_sigma_tenth_of_five_hundred(self):
        sc = build_scenario(None, embedding_pool(1000, D=4), 500, 500, 0.1, seed=2)
        acc = sc.accounting()
        assert acc["true_pairs"] == 50
        assert acc["unmatched_ingress"] == acc["unmatched_egress"] == 450

    def test_deterministic(self):
        pool = embedding_pool(100)
        a = build_scenario(None, pool, 30, 40, 0.5, seed=3)
        b = build_scenario(None, pool, 30, 40, 0.5, seed=3)
        assert a.ingress_ids == b.ingress_ids and a.egress_ids == b.egress_ids and a.true_pairs == b.true_pairs
        c = build_scenario(None, pool, 30, 40, 0.5, seed=4)
        assert c.ingress_ids != a.ingress_ids

    def test_noise_flows_have_no_counterpart(self):
        pool = embedding_pool(100)
        sc = build_scenario(None, pool, 30, 30, 0.3, seed=5)
        sess = dict(zip(pool.flow_ids, pool.sessions))
        in_s = {sess[f] for f in sc.ingress_ids}
        out_s = {sess[f] for f in sc.egress_ids}
        paired = {sess[a] for a, _ in sc.true_pairs}
        assert in_s & out_s == paired

    def test_restricted_to_test_dataset(self):
        pool = embedding_pool(40)
        keep = [f"s{s:04d}" for s in range(10)]
        ds = Dataset([FlowTrace(f"{s}_x", "ingress", 0, 0, s, [PacketRecord(0.0, 1, 1)]) for s in keep])
        sc = build_scenario(ds, pool, 4, 4, 0.5, seed=0)
        assert {f[:5] for f in sc.ingress_ids + sc.egress_ids} <= set(keep)

    def test_pool_too_small(self):
        with pytest.raises(ScenarioError, match="needs 10 paired"):
            build_scenario(None, embedding_pool(25), 20, 20, 0.5, seed=0)

    def test_sigma_bounds(self):
        for bad in (0.0, 1.2):
            with pytest.raises(ScenarioError):
                build_scenario(None, embedding_pool(10), 4, 4, bad, 0)

    def test_ingress_only_sessions_feed_ingress_noise(self):
        pool = embedding_pool(30, missing=10)
        sc = build_scenario(None, pool, 20, 12, 0.5, seed=1)
        assert sc.accounting()["unmatched_ingress"] == 14

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([0.1, 0.3, 0.5, 0.8, 1.0]), st.integers(0, 999))
    def test_accounting_reconciles(self, N, M, sigma, seed):
        sc = build_scenario(None, embedding_pool(90, D=4), N, M, sigma, seed)
        acc = sc.accounting()
        k = n_true_pairs(sigma, N, M)
        assert acc["true_pairs"] == k == math.floor(sigma * min(N, M) + 0.5)
        assert acc["true_pairs"] + acc["unmatched_ingress"] == N
        assert acc["true_pairs"] + acc["unmatched_egress"] == M
        ins = [a for a, _ in sc.true_pairs]
        outs = [b for _, b in sc.true_pairs]
        assert len(set(ins)) == len(ins) and len(set(outs)) == len(outs)
        assert set(ins) <= set(sc.ingress_ids) and set(outs) <= set(sc.egress_ids)


@pytest.fixture(scope="module")
def sc():
    return build_scenario(None, embedding_pool(300, D=16, noise=0.4), 200, 200, 0.5, seed=7)


class TestMatchers:
    def test_pairwise_counts(self):
        sc = build_scenario(None, embedding_pool(20), 10, 10, 1.0, seed=0)
        res = match_pairwise(sc, 0.5)
        assert res.comparisons == 100 == len(res.scores)
        assert match_pairwise(sc, -1.0).declared.all()
        assert not match_pairwise(sc, 1.0 + 1e-9).declared.any()

    def test_decisions_follow_threshold(self, sc):
        res = match_pairwise(sc, 0.3)
        for d in list(res.decisions(sc))[:500]:
            assert d.declared == (d.score >= 0.3)

    def test_full_probe_equals_pairwise_top_k(self, sc):
        idx = scenario_index(sc, K=10, seed=0)
        ann = match_ann(sc, idx, n_probe=10, tau=0.2, top_k=3)
        pw = match_pairwise(sc, 0.2)
        S = pw.scores.reshape(sc.N, sc.M)
        eid = np.array(sc.egress_ids)
        for i in range(sc.N):
            order = np.lexsort((eid, -S[i]))[:3]
            got = ann.e_idx[ann.q_idx == i]
            assert got.tolist() == order.tolist()
        assert ann.comparisons == sc.N * sc.M

    def test_containment_when_top_k_is_m(self, sc):
        idx = scenario_index(sc, K="auto", seed=1)
        for n_probe in (1, 4, idx.K):
            ann = match_ann(sc, idx, n_probe, 0.3, top_k=sc.M)
            assert ann.declared_pairs(sc) <= match_pairwise(sc, 0.3).declared_pairs(sc)
            assert ann.comparisons <= sc.N * sc.M
            if n_probe < idx.K:
                assert ann.comparisons < sc.N * sc.M

    def test_ann_top1_agrees_with_pairwise(self, sc):
        idx = scenario_index(sc, K=auto_k(sc.M), seed=2)
        ann = match_ann(sc, idx, 8, -1.0, top_k=1)
        S = match_pairwise(sc, -1.0).scores.reshape(sc.N, sc.M)
        qi = {f: i for i, f in enumerate(sc.ingress_ids)}
        ann_top = dict(zip(ann.q_idx.tolist(), ann.e_idx.tolist()))
        differ = sum(ann_top.get(qi[a]) != int(np.argmax(S[qi[a]])) for a, _ in sc.true_pairs)
        assert differ <= 0.1 * len(sc.true_pairs)

    def test_workers_do_not_change_results(self, sc):
        idx = scenario_index(sc, K=12, seed=3)
        a = match_ann(sc, idx, 3, 0.2)
        b = match_ann(sc, idx, 3, 0.2, workers=4)
        assert np.array_equal(a.scores, b.scores) and np.array_equal(a.e_idx, b.e_idx)


class TestRoc:
    def test_separable(self):
        roc = roc_sweep([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
        assert any(p.fpr == 0 and p.tpr == 1 for p in roc)

    def test_all_equal(self):
        roc = roc_sweep([0.5] * 5, [True, False, True, False, False])
        assert [(p.fpr, p.tpr) for p in roc] == [(0.0, 0.0), (1.0, 1.0)]

    def test_six_scores_against_enumeration(self):
        scores = [0.9, 0.4, 0.7, 0.4, 0.1, 0.8]
        labels = [True, False, True, True, False, False]
        got = {(p.tpr, p.fpr) for p in roc_sweep(scores, labels)}
        assert got == ref.roc_points(scores, labels)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
    def test_enumeration_and_monotonicity(self, pairs):
        scores = [s / 5 for s, _ in pairs]
        labels = [y for _, y in pairs]
        if all(labels) or not any(labels):
            with pytest.raises(SweepError):
                roc_sweep(scores, labels)
            return
        roc = roc_sweep(scores, labels)
        assert {(p.tpr, p.fpr) for p in roc} == ref.roc_points(scores, labels)
        taus = [p.tau for p in roc]
        assert taus == sorted(taus, reverse=True)
        assert all(b.tpr >= a.tpr and b.fpr >= a.fpr for a, b in zip(roc, roc[1:]))

    def test_unscored_pairs_lower_the_ceiling(self):
        roc = roc_sweep([0.9, 0.5], [True, False], n_true=4, n_negatives=10)
        assert roc[-1].tpr == 0.25 and roc[-1].fpr == 0.1

    def test_empty(self):
        with pytest.raises(SweepError):
            roc_sweep([], [])

    def test_tpr_at_fpr(self):
        roc = [RocPoint(math.inf, 0, 0), RocPoint(0.5, 0.8, 0.1), RocPoint(0.1, 1, 1)]
        assert tpr_at_fpr(roc, 0.2) == 0.8
        assert tpr_at_fpr([RocPoint(math.inf, 0, 0), RocPoint(0.9, 0.3, 0.0), RocPoint(0.1, 1, 1)], 0.0) == 0.3
        assert tpr_at_fpr(roc, 0.05) == 0.0

    def test_dominance(self):
        good = roc_sweep([0.9, 0.8, 0.3, 0.2], [True, True, False, False])
        bad = roc_sweep([0.9, 0.8, 0.3, 0.2], [False, False, True, True])
        assert dominates(good, bad) and not dominates(bad, good)

    def test_dominance_tie_at_zero_is_a_violation(self):
        # a false pair on top leaves TPR at 0, no better than any baseline there
        model = roc_sweep([0.9, 0.8, 0.3], [False, True, True], n_negatives=100)
        base = roc_sweep([0.5, 0.45, 0.4], [False, False, True], n_negatives=100)
        assert dominance_violations(model, base).tolist() == [1]
        assert not dominates(model, base)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=40),
           st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=40))
    def test_vectorized_lookups_match_scans(self, a, b):
        if not any(t for _, t in a) or all(t for _, t in a) or not any(t for _, t in b) or all(t for _, t in b):
            return
        ra = roc_sweep([s for s, _ in a], [t for _, t in a])
        rb = roc_sweep([s for s, _ in b], [t for _, t in b])

        def scan(roc, f):
            return max((p.tpr for p in roc if p.fpr <= f), default=0.0)

        for p in ra:
            assert tpr_at_fpr(rb, p.fpr) == scan(rb, p.fpr)
        want = [i for i, p in enumerate(ra) if p.fpr > 0 and not p.tpr > scan(rb, p.fpr)
                and not (p.tpr >= 1 and scan(rb, p.fpr) >= 1)]
        assert dominance_violations(ra, rb).tolist() == want


class TestReports:
    def test_evaluate_and_save(self, tmp_path):
        sc = build_scenario(None, embedding_pool(80, noise=0.3), 40, 40, 0.5, seed=1)
        rep = evaluate(sc, match_pairwise(sc, 0.5), {"seed": 1}, {"match_s": 0.01})
        assert rep.comparisons == 1600 and rep.accounting["true_pairs"] == 20
        assert set(rep.tpr_at) == {"0.01", "0.05", "0.1", "0.2"}
        assert rep.roc == rep.roc_scored  # pairwise scores every pair
        assert dominates(rep.roc, random_baseline(sc, 0))
        save_report(rep, tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        assert "timings" not in doc and doc["roc"][0][0] == "inf"
        rows = list(csv.reader(open(tmp_path / "r.roc.csv")))
        assert rows[0] == ["tau", "tpr", "fpr"] and len(rows) == len(rep.roc) + 1
        assert json.loads((tmp_path / "r.timings.json").read_text()) == {"match_s": 0.01}

    def test_ann_reports_both_fpr_readings(self):
        sc = build_scenario(None, embedding_pool(150, noise=0.3), 100, 100, 0.5, seed=2)
        idx = scenario_index(sc, K=10, seed=0)
        rep = evaluate(sc, match_ann(sc, idx, 2, 0.5), {})
        assert rep.comparisons < 100 * 100
        # the scored-only denominator is smaller, so its FPR at each threshold is larger
        for a, b in zip(rep.roc, rep.roc_scored):
            assert a.tpr == b.tpr and b.fpr >= a.fpr

    def test_embeddings_roundtrip(self, tmp_path):
        pool = embedding_pool(5)
        pool.meta = {"stage_hash": "x"}
        save_embeddings(pool, tmp_path / "e.jsonl")
        back = load_embeddings(tmp_path / "e.jsonl")
        assert back.flow_ids == pool.flow_ids and back.meta == pool.meta
        assert np.array_equal(back.vectors, pool.vectors)


class TestScaling:
    def test_pairwise_exact(self):
        res = scaling_bench([100, 200, 400], sigma=0.1)
        pw = [r for r in res.rows if r.matcher == "pairwise"]
        assert [r.comparisons for r in pw] == [10_000, 40_000, 160_000]
        assert [r.ratio for r in pw] == [1.0, 4.0, 16.0]
        assert abs(res.slopes["pairwise"] - 2.0) < 1e-12

    def test_ann_slope_under_auto_k_is_about_one_and_a_half(self):
        # comparisons ~ N * n_probe * M / sqrt(M) once n_probe < K
        res = scaling_bench([400, 800, 1600], sigma=0.1, K="auto")
        assert 1.35 <= res.slopes["ann"] <= 1.6

    def test_errors(self):
        with pytest.raises(BenchError):
            scaling_bench([100, 200])
        with pytest.raises(BenchError):
            scaling_bench([100, 300, 200])

    def test_loglog_slope(self):
        assert abs(loglog_slope([1, 10, 100], [3, 300, 30_000]) - 2.0) < 1e-12

    def test_synthetic_scenario_shape(self):
        sc = synthetic_scenario(120, 0.25, seed=0)
        assert sc.accounting() == {"true_pairs": 30, "unmatched_ingress": 90, "unmatched_egress": 90,
                                   "N": 120, "M": 120}
        assert np.allclose(np.linalg.norm(sc.egress, axis=1), 1.0)

    def test_csv(self, tmp_path):
        res = scaling_bench([50, 100, 200], repetitions=2)
        save_scaling(res, tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["n", "matcher", "comparisons", "wall_s", "ratio"]
        assert len(rows) == 7
        assert "slopes" in json.loads((tmp_path / "s.json").read_text())
