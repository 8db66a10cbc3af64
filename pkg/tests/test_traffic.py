import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rector.traffic import (
    ConfigError,
    Dataset,
    FlowTrace,
    PacketRecord,
    SplitError,
    SynthConfig,
    dumps_dataset,
    gen_synthetic,
    load_dataset,
    save_dataset,
    split_by_circuit,
    validate_dataset,
)


def _flow(fid, role="ingress", circuit=0, website=0, session="s0", times=(0.0, 0.1, 0.2)):
    return FlowTrace(fid, role, circuit, website, session, [PacketRecord(t, 100, 1) for t in times])


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(SynthConfig(n_circuits=2, n_websites=2, visits_per_pair=1, seed=7))


class TestValidate:
    def test_sorted_dataset_is_clean(self):
        ds = Dataset([_flow("a"), _flow("b", role="egress")])
        assert validate_dataset(ds) == []

    def test_time_inversion_names_the_flow(self):
        ds = Dataset([_flow("a"), _flow("b", role="egress", times=(0.0, 0.3, 0.2))])
        bad = validate_dataset(ds)
        assert [(v.flow_id, v.rule) for v in bad] == [("b", "time_sorted")]

    def test_duplicate_flow_id(self):
        ds = Dataset([_flow("a"), _flow("a", role="egress")])
        assert [v.rule for v in validate_dataset(ds)] == ["unique_flow_id"]

    def test_second_trace_for_a_role(self):
        ds = Dataset([_flow("a"), _flow("b")])
        assert [v.rule for v in validate_dataset(ds)] == ["one_trace_per_role"]

    def test_packet_field_rules(self):
        f = FlowTrace("x", "ingress", 0, 0, "s", [PacketRecord(-1.0, 0, 2)])
        rules = {v.rule for v in validate_dataset(Dataset([f]))}
        assert rules == {"time_nonnegative", "size_positive", "direction"}

    def test_session_spanning_circuits(self):
        ds = Dataset([_flow("a"), _flow("b", role="egress", circuit=1)])
        assert [v.rule for v in validate_dataset(ds)] == ["session_identity"]

    def test_unknown_role(self):
        assert [v.rule for v in validate_dataset(Dataset([_flow("a", role="middle")]))] == ["role"]


class TestGenerator:
    def test_counts(self, small):
        assert len(small.flows) == 8
        assert sum(f.role == "ingress" for f in small.flows) == 4
        assert len(small.complete_sessions()) == 4
        assert validate_dataset(small) == []

    def test_byte_identical(self, small):
        again = gen_synthetic(SynthConfig(n_circuits=2, n_websites=2, visits_per_pair=1, seed=7))
        assert dumps_dataset(again) == dumps_dataset(small)

    def test_seed_changes_output(self, small):
        other = gen_synthetic(SynthConfig(n_circuits=2, n_websites=2, visits_per_pair=1, seed=8))
        assert dumps_dataset(other) != dumps_dataset(small)

    def test_degenerate_noise_is_pure_shift(self):
        cfg = SynthConfig(n_circuits=3, n_websites=3, drop_prob=0.0, latency_jitter_s=0.0,
                          mean_latency_s=0.05, seed=1)
        ds = gen_synthetic(cfg)
        for roles in ds.sessions().values():
            ing, egr = roles["ingress"], roles["egress"]
            assert len(ing.packets) == len(egr.packets)
            t_in = np.array([p.t for p in ing.packets])
            t_out = np.array([p.t for p in egr.packets])
            np.testing.assert_allclose(t_out, t_in + 0.05, atol=2e-6)
            assert all(p.size % 512 == 0 for p in egr.packets)
            assert np.all(np.diff(t_out) >= 0)

    def test_cell_requantization_rounds_up(self):
        ds = gen_synthetic(SynthConfig(n_circuits=2, n_websites=2, drop_prob=0.0, latency_jitter_s=0.0, seed=3))
        for roles in ds.sessions().values():
            ing = sorted(p.size for p in roles["ingress"].packets)
            egr = sorted(p.size for p in roles["egress"].packets)
            assert egr == sorted(-(-s // 512) * 512 for s in ing)

    def test_duration_cap(self):
        ds = gen_synthetic(SynthConfig(n_circuits=2, n_websites=3, duration_cap_s=5.0, seed=2))
        assert all(p.t < 5.0 for f in ds.flows for p in f.packets)

    def test_websites_share_structure_across_circuits(self):
        # same website on different circuits looks more alike than different websites
        ds = gen_synthetic(SynthConfig(n_circuits=6, n_websites=6, seed=4))
        counts = {}
        for f in ds.flows:
            if f.role == "ingress":
                counts.setdefault(f.website_id, []).append(len(f.packets))
        per_site = np.array([np.mean(v) for v in counts.values()])
        within = np.mean([np.std(v) for v in counts.values()])
        assert np.std(per_site) > 0.3 * within

    @pytest.mark.parametrize("field,value", [("n_circuits", 0), ("drop_prob", 1.5), ("duration_cap_s", 0.0),
                                             ("cell_bytes", 0), ("mean_latency_s", -1.0)])
    def test_invalid_config(self, field, value):
        cfg = dataclasses.replace(SynthConfig(), **{field: value})
        with pytest.raises(ConfigError):
            gen_synthetic(cfg)

    def test_meta_records_provenance(self, small):
        assert small.meta["seed"] == 7
        assert small.meta["config_hash"] == SynthConfig(n_circuits=2, n_websites=2, seed=7).config_hash()

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.floats(0.0, 0.5), st.integers(0, 10_000))
    def test_pair_completeness(self, c, w, v, drop, seed):
        ds = gen_synthetic(SynthConfig(n_circuits=c, n_websites=w, visits_per_pair=v, drop_prob=drop, seed=seed))
        assert len(ds.flows) == 2 * c * w * v
        assert len(ds.complete_sessions()) == c * w * v
        assert validate_dataset(ds) == []


class TestSplit:
    def _circuits(self, n):
        flows = []
        for c in range(n):
            flows.append(_flow(f"c{c}_in", "ingress", c, 0, f"c{c}"))
            flows.append(_flow(f"c{c}_out", "egress", c, 0, f"c{c}"))
        return Dataset(flows)

    def test_three_hundred_to_forty_one(self):
        tr, te = split_by_circuit(self._circuits(341), 300 / 341, seed=0)
        assert (len(tr.circuits()), len(te.circuits())) == (300, 41)

    def test_ten_circuits(self):
        tr, te = split_by_circuit(self._circuits(10), 0.9, seed=5)
        assert (len(tr.circuits()), len(te.circuits())) == (9, 1)
        assert not set(tr.circuits()) & set(te.circuits())

    def test_deterministic(self):
        ds = self._circuits(20)
        a = split_by_circuit(ds, 0.7, seed=3)
        b = split_by_circuit(ds, 0.7, seed=3)
        assert a[0].circuits() == b[0].circuits()

    def test_errors(self):
        with pytest.raises(SplitError):
            split_by_circuit(self._circuits(1), 0.5, 0)
        with pytest.raises(SplitError):
            split_by_circuit(self._circuits(5), 1.0, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 60), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
    def test_disjoint_and_whole_circuits(self, n, frac, seed):
        ds = self._circuits(n)
        tr, te = split_by_circuit(ds, frac, seed)
        assert not set(tr.circuits()) & set(te.circuits())
        assert sorted(tr.circuits() + te.circuits()) == list(range(n))
        assert len(tr.flows) + len(te.flows) == len(ds.flows)
        assert tr.circuits() and te.circuits()


class TestIO:
    def test_roundtrip(self, small, tmp_path):
        p = tmp_path / "ds.jsonl"
        save_dataset(small, p)
        back = load_dataset(p)
        assert back.flows == small.flows
        assert back.meta == small.meta
        assert dumps_dataset(back) == dumps_dataset(small)

    def test_meta_line_optional(self, small, tmp_path):
        p = tmp_path / "ds.jsonl"
        p.write_text("\n".join(dumps_dataset(small).splitlines()[1:]) + "\n")
        assert load_dataset(p).flows == small.flows
