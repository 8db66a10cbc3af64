import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rector.features import (
    HEADER,
    WindowSpec,
    featurize_dataset,
    featurize_flow,
    featurize_window,
    load_features,
    partition_windows,
    save_features,
)
from rector.traffic import FlowTrace, PacketRecord, SynthConfig, gen_synthetic

from reference import featurize_window as ref_window


def _trace(packets, fid="f"):
    return FlowTrace(fid, "ingress", 0, 0, "s", [PacketRecord(*p) for p in packets])


@st.composite
def traces(draw, max_packets=120, horizon=60.0):
    n = draw(st.integers(0, max_packets))
    ts = sorted(draw(st.lists(st.floats(0.0, horizon, allow_nan=False), min_size=n, max_size=n)))
    sizes = draw(st.lists(st.integers(1, 3000), min_size=n, max_size=n))
    dirs = draw(st.lists(st.sampled_from([1, -1]), min_size=n, max_size=n))
    return _trace(list(zip(ts, sizes, dirs)))


class TestPartition:
    def test_half_open_boundary(self):
        w = partition_windows(_trace([(0.0, 10, 1), (4.9, 10, 1), (5.0, 10, 1)]), WindowSpec())
        assert [p.t for p in w[0]] == [0.0, 4.9]
        assert [p.t for p in w[1]] == [5.0]

    def test_empty_trace(self):
        assert partition_windows(_trace([]), WindowSpec()) == [[] for _ in range(10)]

    def test_horizon_discards(self):
        w = partition_windows(_trace([(49.99, 10, 1), (50.0, 10, 1)]), WindowSpec())
        assert sum(len(x) for x in w) == 1 and len(w[9]) == 1


class TestWindow:
    def test_empty(self):
        assert np.array_equal(featurize_window([], 100, 5.0), np.zeros((100, 2)))

    def test_single_packet(self):
        out = featurize_window([PacketRecord(1.0, 1500, 1)], 100, 5.0)
        assert out[0].tolist() == [1.0, 0.0]
        assert not out[1:].any()

    def test_hand_computed(self):
        out = featurize_window([PacketRecord(0.0, 750, -1), PacketRecord(0.2, 1500, 1)], 4, 5.0)
        assert out[:2].tolist() == [[-0.5, 0.0], [1.0, 0.2]]

    def test_size_clipped_at_mtu(self):
        out = featurize_window([PacketRecord(0.0, 9000, -1)], 3, 5.0)
        assert out[0, 0] == -1.0

    def test_overflow_keeps_first_L(self):
        pk = [PacketRecord(0.01 * i, 100 + i, 1) for i in range(7)]
        out = featurize_window(pk, 5, 5.0)
        assert np.allclose(out[:, 0], [(100 + i) / 1500 for i in range(5)])

    @settings(max_examples=200, deadline=None)
    @given(traces(max_packets=40, horizon=4.99), st.integers(1, 50), st.floats(0.1, 10.0))
    def test_matches_scalar_reference(self, tr, L, window_s):
        pk = [(p.t, p.size, p.dir) for p in tr.packets]
        got = featurize_window(tr.packets, L, window_s)
        assert np.array_equal(got, np.array(ref_window(pk, L, window_s)))


class TestFlow:
    def test_empty_trace(self):
        ft = featurize_flow(_trace([]))
        assert ft.values.shape == (10, 100, 2)
        assert not ft.values.any() and not ft.valid_len.any()

    def test_short_trace_leaves_late_windows_zero(self):
        pk = [(0.1 * i, 500, 1 if i % 3 else -1) for i in range(120)]  # 0 .. 11.9 s
        ft = featurize_flow(_trace(pk))
        assert ft.valid_len[:3].all()
        assert not ft.values[3:].any()

    def test_removing_a_window_changes_only_that_slice(self):
        pk = [(0.25 * i, 200 + i, 1) for i in range(200)]
        full = featurize_flow(_trace(pk))
        cut = featurize_flow(_trace([p for p in pk if not 20.0 <= p[0] < 25.0]))
        diff = np.flatnonzero(np.any(full.values != cut.values, axis=(1, 2)))
        assert diff.tolist() == [4]

    @settings(max_examples=150, deadline=None)
    @given(traces())
    def test_invariants(self, tr):
        spec = WindowSpec()
        ft = featurize_flow(tr, spec)
        assert ft.values.shape == (spec.W, spec.L, 2)
        assert np.all(ft.valid_len <= spec.L)
        assert np.all(np.abs(ft.values[..., 0]) <= 1.0)
        assert np.all((ft.values[..., 1] >= 0) & (ft.values[..., 1] <= spec.window_s))
        for w in range(spec.W):
            assert not ft.values[w, ft.valid_len[w]:].any()
            assert np.all(ft.values[w, :ft.valid_len[w], 0] != 0)

    @settings(max_examples=60, deadline=None)
    @given(traces(), st.integers(0, 9), st.floats(0.0, 4.99), st.integers(1, 1500))
    def test_locality(self, tr, w, offset, size):
        """Inserting a packet into window w changes only slice w."""
        spec = WindowSpec()
        t_new = w * spec.window_s + offset
        pk = sorted([(p.t, p.size, p.dir) for p in tr.packets] + [(t_new, size, 1)], key=lambda p: p[0])
        a = featurize_flow(tr, spec).values
        b = featurize_flow(_trace(pk), spec).values
        changed = np.flatnonzero(np.any(a != b, axis=(1, 2)))
        assert set(changed.tolist()) <= {w}

    def test_invalid_spec(self):
        for bad in ({"W": 0}, {"L": 0}, {"window_s": 0.0}):
            with pytest.raises(ValueError):
                WindowSpec(**bad)


class TestDump:
    def test_roundtrip(self, tmp_path):
        ds = gen_synthetic(SynthConfig(n_circuits=2, n_websites=3, seed=1))
        store = featurize_dataset(ds.flows, WindowSpec(), {"stage_hash": "abc"})
        side = save_features(store, tmp_path / "x.feat")
        blob = (tmp_path / "x.feat").read_bytes()
        assert blob[:4] == b"RCTF" and HEADER.size == 16
        assert len(blob) == 16 + len(store) * 10 * 100 * 2 * 8
        assert side.name == "x.feat.ids.jsonl"
        back = load_features(tmp_path / "x.feat")
        assert back.flow_ids == store.flow_ids and back.roles == store.roles
        assert np.array_equal(back.values, store.values)
        assert np.array_equal(back.valid_len, store.valid_len)
        assert back.meta["stage_hash"] == "abc"

    def test_rejects_bad_magic(self, tmp_path):
        store = featurize_dataset([_trace([(0.0, 10, 1)])], WindowSpec(W=1, L=2))
        save_features(store, tmp_path / "x.feat")
        raw = bytearray((tmp_path / "x.feat").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "x.feat").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_features(tmp_path / "x.feat")

    def test_rejects_truncation(self, tmp_path):
        store = featurize_dataset([_trace([(0.0, 10, 1)])], WindowSpec(W=1, L=2))
        save_features(store, tmp_path / "x.feat")
        raw = (tmp_path / "x.feat").read_bytes()
        (tmp_path / "x.feat").write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="size"):
            load_features(tmp_path / "x.feat")
