"""Flow traces, dataset validation, circuit-disjoint splits and a synthetic
Tor-like traffic generator.

A flow is the packet sequence observed at one vantage point (``ingress`` at
the entry guard, ``egress`` at the exit) for one website visit. Flows of the
same visit share a ``session_id`` and form the only true pair for that visit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .rng import derive

ROLES = ("ingress", "egress")


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class PacketRecord:
    t: float
    size: int
    dir: int


@dataclass
class FlowTrace:
    flow_id: str
    role: str
    circuit_id: int
    website_id: int
    session_id: str
    packets: list[PacketRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "role": self.role,
            "circuit_id": self.circuit_id,
            "website_id": self.website_id,
            "session_id": self.session_id,
            "packets": [[p.t, p.size, p.dir] for p in self.packets],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlowTrace":
        return cls(
            flow_id=str(obj["flow_id"]),
            role=str(obj["role"]),
            circuit_id=int(obj["circuit_id"]),
            website_id=int(obj["website_id"]),
            session_id=str(obj["session_id"]),
            packets=[PacketRecord(float(t), int(s), int(d)) for t, s, d in obj["packets"]],
        )


@dataclass
class Dataset:
    flows: list[FlowTrace]
    meta: dict = field(default_factory=dict)

    def by_id(self) -> dict[str, FlowTrace]:
        return {f.flow_id: f for f in self.flows}

    def sessions(self) -> dict[str, dict[str, FlowTrace]]:
        """session_id -> {role: flow}."""
        out: dict[str, dict[str, FlowTrace]] = {}
        for f in self.flows:
            out.setdefault(f.session_id, {})[f.role] = f
        return out

    def complete_sessions(self) -> list[str]:
        """Sorted ids of sessions that have both an ingress and an egress flow."""
        return sorted(s for s, roles in self.sessions().items() if len(roles) == 2)

    def circuits(self) -> list[int]:
        return sorted({f.circuit_id for f in self.flows})

    def subset(self, circuit_ids: Iterable[int], **meta) -> "Dataset":
        keep = set(circuit_ids)
        return Dataset([f for f in self.flows if f.circuit_id in keep], {**self.meta, **meta})


@dataclass(frozen=True)
class Violation:
    flow_id: str
    rule: str
    detail: str = ""


def validate_dataset(ds: Dataset) -> list[Violation]:
    """Check every type invariant; returns [] for a well-formed dataset."""
    out: list[Violation] = []
    seen: set[str] = set()
    session_roles: dict[str, dict[str, str]] = {}
    session_key: dict[str, tuple[int, int]] = {}
    for f in ds.flows:
        if f.flow_id in seen:
            out.append(Violation(f.flow_id, "unique_flow_id", "flow_id appears more than once"))
        seen.add(f.flow_id)
        if f.role not in ROLES:
            out.append(Violation(f.flow_id, "role", f"unknown role {f.role!r}"))
        key = (f.circuit_id, f.website_id)
        if session_key.setdefault(f.session_id, key) != key:
            out.append(Violation(f.flow_id, "session_identity",
                                 f"session {f.session_id} spans several circuit/website pairs"))
        roles = session_roles.setdefault(f.session_id, {})
        if f.role in roles:
            out.append(Violation(f.flow_id, "one_trace_per_role",
                                 f"session {f.session_id} already has {f.role} {roles[f.role]}"))
        else:
            roles[f.role] = f.flow_id
        prev = -math.inf
        for i, p in enumerate(f.packets):
            if not (p.t >= 0 and math.isfinite(p.t)):
                out.append(Violation(f.flow_id, "time_nonnegative", f"packet {i}: t={p.t}"))
            if p.size < 1:
                out.append(Violation(f.flow_id, "size_positive", f"packet {i}: size={p.size}"))
            if p.dir not in (1, -1):
                out.append(Violation(f.flow_id, "direction", f"packet {i}: dir={p.dir}"))
            if p.t < prev:
                out.append(Violation(f.flow_id, "time_sorted", f"packet {i}: {p.t} < {prev}"))
            prev = p.t
    return out


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class SynthConfig:
    n_circuits: int = 40
    n_websites: int = 20
    visits_per_pair: int = 1
    mean_latency_s: float = 0.08
    latency_jitter_s: float = 0.02
    drop_prob: float = 0.02
    cell_bytes: int = 512
    duration_cap_s: float = 60.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_circuits", "n_websites", "visits_per_pair", "cell_bytes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")
        if self.mean_latency_s < 0 or self.latency_jitter_s < 0:
            raise ConfigError("latency parameters must be non-negative")
        if not self.duration_cap_s > 0:
            raise ConfigError(f"duration_cap_s must be > 0, got {self.duration_cap_s}")

    def config_hash(self) -> str:
        return stable_hash(asdict(self))


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class _Burst:
    start: float
    n_packets: int
    up_frac: float
    iat: float
    big_frac: float


def _website_profile(seed: int, website_id: int) -> list[_Burst]:
    rng = derive(seed, "website", website_id)
    n = int(rng.integers(4, 10))
    starts = np.sort(rng.uniform(0.5, 35.0, size=n - 1))
    starts = np.concatenate([[0.0], starts])
    return [
        _Burst(
            start=float(s),
            n_packets=int(rng.integers(4, 30)),
            up_frac=float(rng.uniform(0.05, 0.35)),
            iat=float(rng.uniform(0.004, 0.04)),
            big_frac=float(rng.uniform(0.4, 0.95)),
        )
        for s in starts
    ]


def _circuit_profile(seed: int, circuit_id: int) -> tuple[float, float]:
    """(rate multiplier on inter-arrival times, added round trip before each burst)"""
    rng = derive(seed, "circuit", circuit_id)
    return float(rng.lognormal(0.0, 0.3)), float(rng.uniform(0.05, 0.4))


def _emit_burst(rng: np.random.Generator, b: _Burst, start: float, n: int, speed: float):
    iats = rng.exponential(b.iat * speed, size=n)
    times = start + np.cumsum(iats)
    up = rng.random(n) < b.up_frac
    big = rng.random(n) < b.big_frac
    sizes = np.where(
        up,
        rng.integers(54, 600, size=n),
        np.where(big, 1500, rng.integers(100, 1500, size=n)),
    )
    dirs = np.where(up, 1, -1)
    return times, sizes, dirs


def _ingress_packets(cfg: SynthConfig, circuit_id: int, website_id: int, visit: int):
    profile = _website_profile(cfg.seed, website_id)
    speed, rtt = _circuit_profile(cfg.seed, circuit_id)
    rng = derive(cfg.seed, "visit", circuit_id, website_id, visit)
    chunks = []
    for b in profile:
        # each visit re-times, re-sizes and occasionally skips the site's bursts
        if b.start > 0 and rng.random() < 0.15:
            continue
        start = max(0.0, b.start * speed + rtt + rng.normal(0.0, 1.0)) if b.start > 0 else 0.0
        n = max(1, int(round(b.n_packets * rng.uniform(0.6, 1.4))))
        chunks.append(_emit_burst(rng, b, start, n, speed))
    # visit-specific content (ads, lazy loads) absent from the site profile
    for _ in range(int(rng.poisson(3.0))):
        extra = _Burst(
            start=float(rng.uniform(0.5, 40.0)),
            n_packets=int(rng.integers(3, 20)),
            up_frac=float(rng.uniform(0.05, 0.4)),
            iat=float(rng.uniform(0.004, 0.04)),
            big_frac=float(rng.uniform(0.3, 0.95)),
        )
        chunks.append(_emit_burst(rng, extra, extra.start, extra.n_packets, speed))
    t = np.concatenate([c[0] for c in chunks])
    s = np.concatenate([c[1] for c in chunks])
    d = np.concatenate([c[2] for c in chunks])
    order = np.argsort(t, kind="stable")
    t, s, d = t[order], s[order], d[order]
    t = t - t[0]
    keep = t < cfg.duration_cap_s
    return np.round(t[keep], 6), s[keep].astype(np.int64), d[keep].astype(np.int64)


def _egress_packets(cfg: SynthConfig, circuit_id: int, website_id: int, visit: int, t, s, d):
    rng = derive(cfg.seed, "relay", circuit_id, website_id, visit)
    n = len(t)
    jitter = cfg.latency_jitter_s * rng.lognormal(0.0, 0.5, size=n)
    te = np.round(t + cfg.mean_latency_s + jitter, 6)
    se = -(-s // cfg.cell_bytes) * cfg.cell_bytes
    kept = rng.random(n) >= cfg.drop_prob
    kept &= te < cfg.duration_cap_s
    te, se, de = te[kept], se[kept], d[kept]
    order = np.argsort(te, kind="stable")
    return te[order], se[order], de[order]


def _trace(flow_id, role, c, w, session, t, s, d) -> FlowTrace:
    return FlowTrace(
        flow_id=flow_id,
        role=role,
        circuit_id=c,
        website_id=w,
        session_id=session,
        packets=[PacketRecord(float(a), int(b), int(e)) for a, b, e in zip(t, s, d)],
    )


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Generate ``n_circuits x n_websites x visits_per_pair`` correlated flow pairs.

    Website burst structure is fixed per ``(seed, website_id)`` and circuit
    speed per ``(seed, circuit_id)``, so unrelated flows sharing a website or
    a circuit look alike. The egress side of each visit is the ingress packet
    stream with cell re-quantized sizes, latency plus log-normal jitter,
    independent drops and truncation at ``duration_cap_s``.
    """
    cfg.validate()
    flows: list[FlowTrace] = []
    for c in range(cfg.n_circuits):
        for w in range(cfg.n_websites):
            for v in range(cfg.visits_per_pair):
                session = f"c{c}_w{w}_v{v}"
                t, s, d = _ingress_packets(cfg, c, w, v)
                flows.append(_trace(f"{session}_in", "ingress", c, w, session, t, s, d))
                te, se, de = _egress_packets(cfg, c, w, v, t, s, d)
                flows.append(_trace(f"{session}_out", "egress", c, w, session, te, se, de))
    meta = {"generator": "synthetic", "seed": cfg.seed, "config": asdict(cfg),
            "config_hash": cfg.config_hash()}
    return Dataset(flows, meta)


def split_by_circuit(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition circuits (never individual flows) into train and test sides."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    circuits = ds.circuits()
    if len(circuits) < 2:
        raise SplitError(f"need at least 2 circuits to split, found {len(circuits)}")
    n_train = int(math.floor(train_fraction * len(circuits) + 0.5))
    n_train = min(max(n_train, 1), len(circuits) - 1)
    perm = derive(seed, "split").permutation(len(circuits))
    train_c = sorted(circuits[i] for i in perm[:n_train])
    test_c = sorted(circuits[i] for i in perm[n_train:])
    split_meta = {"train_fraction": train_fraction, "split_seed": seed}
    return (
        ds.subset(train_c, split="train", circuits=train_c, **split_meta),
        ds.subset(test_c, split="test", circuits=test_c, **split_meta),
    )


# ---------------------------------------------------------------- JSONL io


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps({"meta": ds.meta}, sort_keys=True)]
    lines += [json.dumps(f.to_json()) for f in ds.flows]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    """Read flow JSONL. A leading ``{"meta": ...}`` line is optional, so
    converted real captures need only the per-flow lines."""
    flows, meta = [], {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "meta" in obj and "flow_id" not in obj:
                meta = obj["meta"]
            else:
                flows.append(FlowTrace.from_json(obj))
    return Dataset(flows, meta)
