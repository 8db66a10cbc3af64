"""Window partition and the padded W x L x 2 per-packet feature tensor.

Channel 0 carries the direction-signed packet size scaled by the Ethernet
MTU, channel 1 the gap to the previous packet of the same window. Windows
are featurized independently, so damage to one window never leaks into
another.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .traffic import FlowTrace, PacketRecord

MTU = 1500.0
MAGIC = b"RCTF"
HEADER = struct.Struct("<4sIII")  # magic, W, L, record count


@dataclass(frozen=True)
class WindowSpec:
    W: int = 10
    window_s: float = 5.0
    L: int = 100

    def __post_init__(self):
        if self.W < 1 or self.L < 1 or not self.window_s > 0:
            raise ValueError(f"invalid window spec {self}")


@dataclass
class FeatureTensor:
    values: np.ndarray  # (W, L, 2) float64
    valid_len: np.ndarray  # (W,) int64

    @property
    def W(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]


def partition_windows(trace: FlowTrace, spec: WindowSpec) -> list[list[PacketRecord]]:
    windows: list[list[PacketRecord]] = [[] for _ in range(spec.W)]
    for p in trace.packets:
        w = int(p.t // spec.window_s)
        if w < spec.W:
            windows[w].append(p)
    return windows


def featurize_window(packets: Sequence[PacketRecord], L: int, window_s: float) -> np.ndarray:
    out = np.zeros((L, 2))
    prev = None
    for i, p in enumerate(packets[:L]):
        out[i, 0] = p.dir * min(p.size, MTU) / MTU
        out[i, 1] = 0.0 if prev is None else min(max(p.t - prev, 0.0), window_s)
        prev = p.t
    return out


def featurize_flow(trace: FlowTrace, spec: WindowSpec = WindowSpec()) -> FeatureTensor:
    windows = partition_windows(trace, spec)
    values = np.stack([featurize_window(w, spec.L, spec.window_s) for w in windows])
    valid = np.array([min(len(w), spec.L) for w in windows], dtype=np.int64)
    return FeatureTensor(values, valid)


@dataclass
class FeatureStore:
    """Featurized flows keyed by flow_id, plus the labels triplet sampling
    and scenario building need."""

    spec: WindowSpec
    flow_ids: list[str]
    roles: list[str]
    sessions: list[str]
    values: np.ndarray  # (n, W, L, 2)
    valid_len: np.ndarray  # (n, W)
    meta: dict

    def __post_init__(self):
        self.index = {fid: i for i, fid in enumerate(self.flow_ids)}

    def __len__(self) -> int:
        return len(self.flow_ids)

    def tensor(self, flow_id: str) -> FeatureTensor:
        i = self.index[flow_id]
        return FeatureTensor(self.values[i], self.valid_len[i])

    def rows(self, flow_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index[f] for f in flow_ids], dtype=np.int64)


def featurize_dataset(flows: Sequence[FlowTrace], spec: WindowSpec, meta: dict | None = None) -> FeatureStore:
    tensors = [featurize_flow(f, spec) for f in flows]
    n = len(tensors)
    values = np.stack([t.values for t in tensors]) if n else np.zeros((0, spec.W, spec.L, 2))
    valid = np.stack([t.valid_len for t in tensors]) if n else np.zeros((0, spec.W), np.int64)
    return FeatureStore(
        spec=spec,
        flow_ids=[f.flow_id for f in flows],
        roles=[f.role for f in flows],
        sessions=[f.session_id for f in flows],
        values=values,
        valid_len=valid,
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------- dump format


def save_features(store: FeatureStore, path: str | Path) -> Path:
    """Write the binary dump and its ``.ids.jsonl`` sidecar; returns the sidecar path."""
    path = Path(path)
    spec = store.spec
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, spec.W, spec.L, len(store)))
        fh.write(np.ascontiguousarray(store.values, dtype="<f8").tobytes())
    sidecar = path.with_name(path.name + ".ids.jsonl")
    lines = [json.dumps({"meta": {**store.meta, "window": {"W": spec.W, "window_s": spec.window_s,
                                                             "L": spec.L}}}, sort_keys=True)]
    for i, fid in enumerate(store.flow_ids):
        lines.append(json.dumps({"flow_id": fid, "role": store.roles[i], "session_id": store.sessions[i]}))
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return sidecar


def load_features(path: str | Path) -> FeatureStore:
    path = Path(path)
    sidecar = path.with_name(path.name + ".ids.jsonl")
    meta, rows = {}, []
    for line in sidecar.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "meta" in obj and "flow_id" not in obj:
            meta = obj["meta"]
        else:
            rows.append(obj)
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, W, L, n = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a feature dump (magic {magic!r})")
    if len(blob) != HEADER.size + n * W * L * 2 * 8:
        raise ValueError(f"{path}: size does not match {n} records of {W}x{L}x2")
    if n != len(rows):
        raise ValueError(f"{path}: {n} records but {len(rows)} sidecar entries")
    spec = WindowSpec(W, float(meta.get("window", {}).get("window_s", 5.0)), L)
    values = np.frombuffer(blob, dtype="<f8", offset=HEADER.size).reshape(n, W, L, 2).astype(np.float64)
    # a real packet always has a non-zero signed size, so padding rows are recoverable
    valid = (values[..., 0] != 0).sum(axis=2).astype(np.int64)
    return FeatureStore(
        spec=spec,
        flow_ids=[r["flow_id"] for r in rows],
        roles=[r["role"] for r in rows],
        sessions=[r["session_id"] for r in rows],
        values=values,
        valid_len=valid,
        meta=meta,
    )
