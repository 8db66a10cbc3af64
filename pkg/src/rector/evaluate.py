"""Partial-mapping scenarios, pairwise and IVF matchers, ROC sweeps and the
comparison-count scaling benchmark.

A scenario holds N ingress and M egress embeddings of which
round(sigma * min(N, M)) form true pairs; the remaining flows on each side
come from sessions whose counterpart is deliberately left out.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .ann import IvfIndex, build_index, cosine_scores, query
from .rng import derive
from .traffic import Dataset

FPR_TARGETS = (0.01, 0.05, 0.1, 0.2)


class ScenarioError(ValueError):
    pass


class SweepError(ValueError):
    pass


class BenchError(ValueError):
    pass


# ---------------------------------------------------------------- embeddings on disk


@dataclass
class EmbeddingSet:
    flow_ids: list[str]
    roles: list[str]
    sessions: list[str]
    vectors: np.ndarray  # (n, D)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {f: i for i, f in enumerate(self.flow_ids)}

    def role_rows(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == role], dtype=np.int64)


def save_embeddings(es: EmbeddingSet, path: str | Path) -> None:
    lines = [json.dumps({"meta": es.meta}, sort_keys=True)]
    for i, fid in enumerate(es.flow_ids):
        lines.append(json.dumps({"flow_id": fid, "role": es.roles[i], "session_id": es.sessions[i],
                                 "v": es.vectors[i].tolist()}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path: str | Path) -> EmbeddingSet:
    meta, ids, roles, sessions, vecs = {}, [], [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "meta" in obj and "flow_id" not in obj:
            meta = obj["meta"]
            continue
        ids.append(obj["flow_id"])
        roles.append(obj["role"])
        sessions.append(obj["session_id"])
        vecs.append(obj["v"])
    D = len(vecs[0]) if vecs else 0
    return EmbeddingSet(ids, roles, sessions, np.asarray(vecs, dtype=np.float64).reshape(len(ids), D), meta)


# ---------------------------------------------------------------- scenarios


def n_true_pairs(sigma: float, N: int, M: int) -> int:
    return int(math.floor(sigma * min(N, M) + 0.5))


@dataclass
class Scenario:
    ingress_ids: list[str]
    ingress: np.ndarray  # (N, D)
    egress_ids: list[str]
    egress: np.ndarray  # (M, D)
    true_pairs: set[tuple[str, str]]
    sigma: float  # realized |true_pairs| / min(N, M)
    seed: int
    requested_sigma: float = 0.0

    @property
    def N(self) -> int:
        return len(self.ingress_ids)

    @property
    def M(self) -> int:
        return len(self.egress_ids)

    def truth_matrix(self) -> np.ndarray:
        """(N, M) boolean mask of true pairs."""
        qi = {f: i for i, f in enumerate(self.ingress_ids)}
        ei = {f: i for i, f in enumerate(self.egress_ids)}
        out = np.zeros((self.N, self.M), dtype=bool)
        for a, b in self.true_pairs:
            out[qi[a], ei[b]] = True
        return out

    def accounting(self) -> dict[str, int]:
        matched_in = {a for a, _ in self.true_pairs}
        matched_out = {b for _, b in self.true_pairs}
        return {
            "true_pairs": len(self.true_pairs),
            "unmatched_ingress": sum(f not in matched_in for f in self.ingress_ids),
            "unmatched_egress": sum(f not in matched_out for f in self.egress_ids),
            "N": self.N,
            "M": self.M,
        }


def build_scenario(test: Dataset | None, emb: EmbeddingSet, N: int, M: int, sigma: float, seed: int) -> Scenario:
    """Sample a partially mapped scenario from the embedded test flows.

    ``test`` restricts the pool to its sessions when given; otherwise every
    embedded session is eligible.
    """
    if not 0.0 < sigma <= 1.0:
        raise ScenarioError(f"sigma must lie in (0, 1], got {sigma}")
    allowed = None if test is None else {f.session_id for f in test.flows}
    by_session: dict[str, dict[str, int]] = {}
    for i, (s, r) in enumerate(zip(emb.sessions, emb.roles)):
        if allowed is None or s in allowed:
            by_session.setdefault(s, {})[r] = i
    sessions = sorted(by_session)
    complete = [s for s in sessions if len(by_session[s]) == 2]
    n_true = n_true_pairs(sigma, N, M)
    need_in, need_out = N - n_true, M - n_true
    rng = derive(seed, "scenario", N, M, repr(sigma))

    perm = [complete[i] for i in rng.permutation(len(complete))]
    if len(perm) < n_true:
        raise ScenarioError(
            f"scenario N={N} M={M} sigma={sigma} needs {n_true} paired sessions; "
            f"pool has {len(perm)} with both flows")
    true_s = perm[:n_true]
    used = set(true_s)
    rest = [s for s in sessions if s not in used]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    noise_in = [s for s in rest if "ingress" in by_session[s]][:need_in]
    used.update(noise_in)
    noise_out = [s for s in rest if s not in used and "egress" in by_session[s]][:need_out]
    if len(noise_in) < need_in or len(noise_out) < need_out:
        raise ScenarioError(
            f"scenario N={N} M={M} sigma={sigma} needs {n_true} paired + {need_in} ingress-only + "
            f"{need_out} egress-only sessions; pool supplies {len(noise_in)} ingress-only and "
            f"{len(noise_out)} egress-only after {n_true} pairs")

    in_rows = [by_session[s]["ingress"] for s in true_s + noise_in]
    out_rows = [by_session[s]["egress"] for s in true_s + noise_out]
    in_rows = [in_rows[i] for i in rng.permutation(len(in_rows))]
    out_rows = [out_rows[i] for i in rng.permutation(len(out_rows))]
    true_pairs = {(emb.flow_ids[by_session[s]["ingress"]], emb.flow_ids[by_session[s]["egress"]]) for s in true_s}
    return Scenario(
        ingress_ids=[emb.flow_ids[i] for i in in_rows],
        ingress=emb.vectors[in_rows],
        egress_ids=[emb.flow_ids[i] for i in out_rows],
        egress=emb.vectors[out_rows],
        true_pairs=true_pairs,
        sigma=n_true / min(N, M),
        seed=seed,
        requested_sigma=sigma,
    )


# ---------------------------------------------------------------- matchers


@dataclass(frozen=True)
class MatchDecision:
    ingress_id: str
    egress_id: str
    score: float
    declared: bool


@dataclass
class MatchResult:
    """Every scored (ingress, egress) pair of one matcher run."""

    q_idx: np.ndarray
    e_idx: np.ndarray
    scores: np.ndarray
    tau: float
    comparisons: int
    matcher: str

    @property
    def declared(self) -> np.ndarray:
        return self.scores >= self.tau

    def decisions(self, sc: Scenario) -> Iterator[MatchDecision]:
        for q, e, s in zip(self.q_idx, self.e_idx, self.scores):
            yield MatchDecision(sc.ingress_ids[q], sc.egress_ids[e], float(s), bool(s >= self.tau))

    def declared_pairs(self, sc: Scenario) -> set[tuple[str, str]]:
        d = self.declared
        return {(sc.ingress_ids[q], sc.egress_ids[e]) for q, e in zip(self.q_idx[d], self.e_idx[d])}

    def labels(self, sc: Scenario) -> np.ndarray:
        return sc.truth_matrix()[self.q_idx, self.e_idx]


def match_pairwise(sc: Scenario, tau: float) -> MatchResult:
    """Score all N x M pairs."""
    N, M = sc.N, sc.M
    scores = np.empty((N, M))
    for i in range(N):
        scores[i] = cosine_scores(sc.egress, sc.ingress[i])
    q_idx, e_idx = np.divmod(np.arange(N * M), M) if M else (np.zeros(0, int), np.zeros(0, int))
    return MatchResult(q_idx, e_idx, scores.reshape(-1), tau, N * M, "pairwise")


def scenario_index(sc: Scenario, K="auto", n_probe: int = 8, seed: int = 0) -> IvfIndex:
    return build_index(sc.egress_ids, sc.egress, K=K, seed=seed, n_probe=n_probe)


def match_ann(sc: Scenario, index: IvfIndex, n_probe: int | None, tau: float, top_k: int | None = None,
              workers: int = 1) -> MatchResult:
    """Query the egress index with every ingress embedding; pairs outside the
    probed lists are never scored and never declared. ``workers`` > 1 spreads
    queries over threads; results are gathered in ingress order."""
    pos = {f: i for i, f in enumerate(sc.egress_ids)}
    row_to_e = np.array([pos[f] for f in index.flow_ids], dtype=np.int64)

    def one(i):
        return query(index, sc.ingress[i], n_probe=n_probe, top_k=top_k)

    if workers > 1 and sc.N > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, range(sc.N)))
    else:
        results = [one(i) for i in range(sc.N)]
    qs = [np.full(len(r.rows), i, dtype=np.int64) for i, r in enumerate(results)]
    es = [row_to_e[r.rows] for r in results]
    ss = [r.scores for r in results]
    comparisons = sum(r.comparisons for r in results)
    cat = (lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dt))
    return MatchResult(cat(qs, np.int64), cat(es, np.int64), cat(ss, np.float64), tau, comparisons, "ann")


# ---------------------------------------------------------------- ROC


@dataclass(frozen=True)
class RocPoint:
    tau: float
    tpr: float
    fpr: float


def roc_sweep(scores, is_true, n_true: int | None = None, n_negatives: int | None = None) -> list[RocPoint]:
    """Threshold at every distinct score, from +inf downwards.

    ``n_true`` / ``n_negatives`` default to the counts among the scored pairs;
    pass the scenario totals to count never-scored pairs as undeclared.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_true = np.asarray(is_true, dtype=bool)
    if scores.size == 0:
        raise SweepError("no scores to sweep")
    n_true = int(is_true.sum()) if n_true is None else int(n_true)
    n_neg = int((~is_true).sum()) if n_negatives is None else int(n_negatives)
    if n_true <= 0 or n_neg <= 0:
        raise SweepError(f"need at least one true pair and one non-pair (got {n_true}, {n_neg})")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], is_true[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))  # final position of each distinct score
    pts = [RocPoint(math.inf, 0.0, 0.0)]
    pts += [RocPoint(float(s[i]), float(tp[i] / n_true), float(fp[i] / n_neg)) for i in last]
    return pts


def tpr_at_fpr_many(roc: Sequence[RocPoint], fpr_targets) -> np.ndarray:
    """Best TPR among points whose FPR does not exceed each target."""
    targets = np.asarray(fpr_targets, dtype=np.float64)
    if not len(roc):
        return np.zeros_like(targets)
    f = np.array([p.fpr for p in roc], dtype=np.float64)
    t = np.array([p.tpr for p in roc], dtype=np.float64)
    order = np.argsort(f, kind="stable")
    f, best = f[order], np.maximum.accumulate(t[order])
    pos = np.searchsorted(f, targets, side="right")
    return np.where(pos > 0, best[np.maximum(pos - 1, 0)], 0.0)


def tpr_at_fpr(roc: Sequence[RocPoint], fpr_target: float) -> float:
    """Best TPR among points whose FPR does not exceed the target."""
    return float(tpr_at_fpr_many(roc, [fpr_target])[0])


def dominance_violations(roc: Sequence[RocPoint], baseline: Sequence[RocPoint]) -> np.ndarray:
    """Indices of ``roc`` points with FPR > 0 whose TPR does not strictly
    exceed the baseline's at the same FPR. A tie at TPR 1 cannot be beaten
    and is not a violation."""
    f = np.array([p.fpr for p in roc], dtype=np.float64)
    t = np.array([p.tpr for p in roc], dtype=np.float64)
    b = tpr_at_fpr_many(baseline, f)
    bad = (f > 0) & ~(t > b) & ~((t >= 1.0) & (b >= 1.0))
    return np.flatnonzero(bad)


def dominates(roc: Sequence[RocPoint], baseline: Sequence[RocPoint]) -> bool:
    """True when every point of ``roc`` with FPR > 0 has a strictly higher TPR
    than the baseline reaches at the same FPR."""
    return len(dominance_violations(roc, baseline)) == 0


def random_baseline(sc: Scenario, seed: int) -> list[RocPoint]:
    """ROC of uniform random scores over all N x M pairs."""
    rng = derive(seed, "random-baseline")
    truth = sc.truth_matrix().reshape(-1)
    return roc_sweep(rng.random(truth.size), truth)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    sigma: float
    N: int
    M: int
    matcher: str
    roc: list[RocPoint]  # FPR over all N*M - |true| non-pairs
    roc_scored: list[RocPoint]  # FPR over scored non-pairs only
    tpr_at: dict[str, float]
    tpr_at_scored: dict[str, float]
    comparisons: int
    accounting: dict[str, int]
    config: dict
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc.pop("timings")
        doc["roc"] = [[_num(p.tau), p.tpr, p.fpr] for p in self.roc]
        doc["roc_scored"] = [[_num(p.tau), p.tpr, p.fpr] for p in self.roc_scored]
        return doc


def _num(x: float):
    return "inf" if math.isinf(x) else x


def evaluate(sc: Scenario, result: MatchResult, config: dict | None = None,
             timings: dict | None = None, fpr_targets=FPR_TARGETS) -> EvalReport:
    labels = result.labels(sc)
    n_true = len(sc.true_pairs)
    all_neg = sc.N * sc.M - n_true
    roc = roc_sweep(result.scores, labels, n_true=n_true, n_negatives=all_neg)
    scored_neg = int((~labels).sum())
    roc_scored = roc_sweep(result.scores, labels, n_true=n_true, n_negatives=max(scored_neg, 1))
    return EvalReport(
        sigma=sc.sigma, N=sc.N, M=sc.M, matcher=result.matcher,
        roc=roc, roc_scored=roc_scored,
        tpr_at={f"{t:g}": float(tpr_at_fpr(roc, t)) for t in fpr_targets},
        tpr_at_scored={f"{t:g}": float(tpr_at_fpr(roc_scored, t)) for t in fpr_targets},
        comparisons=result.comparisons,
        accounting=sc.accounting(),
        config=dict(config or {}),
        timings=dict(timings or {}),
    )


def save_report(report: EvalReport, path: str | Path) -> None:
    """JSON report plus ``tau,tpr,fpr`` CSV; wall-clock timings go to a
    separate ``.timings.json`` so the report itself is reproducible."""
    path = Path(path)
    path.write_text(json.dumps(report.to_json(), sort_keys=True, indent=1), encoding="utf-8")
    with open(path.with_suffix(".roc.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "tpr", "fpr"])
        for p in report.roc:
            w.writerow([_num(p.tau), repr(p.tpr), repr(p.fpr)])
    path.with_suffix(".timings.json").write_text(json.dumps(report.timings, sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------- scaling


def synthetic_scenario(n: int, sigma: float, seed: int, D: int = 32, n_groups: int = 20,
                       spread: float = 0.35, pair_noise: float = 0.1) -> Scenario:
    """Clustered unit embeddings standing in for a trained encoder: sessions
    scatter around ``n_groups`` website directions and each true pair is two
    noisy copies of one session vector."""
    rng = derive(seed, "synthetic-scenario", n, repr(sigma))
    centers = rng.normal(size=(n_groups, D))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    n_true = n_true_pairs(sigma, n, n)
    n_sessions = n_true + 2 * (n - n_true)
    base = centers[rng.integers(n_groups, size=n_sessions)] + spread * rng.normal(size=(n_sessions, D)) / np.sqrt(D)

    def view(x):
        v = x + pair_noise * rng.normal(size=x.shape) / np.sqrt(D)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    ing = view(base[: n_true + (n - n_true)])
    egr_base = np.concatenate([base[:n_true], base[n_true + (n - n_true):]])
    egr = view(egr_base)
    in_ids = [f"s{i}_in" for i in range(len(ing))]
    out_ids = [f"s{i}_out" for i in range(n_true)] + [f"s{i}_out" for i in range(n, n + (n - n_true))]
    return Scenario(in_ids, ing, out_ids, egr, {(f"s{i}_in", f"s{i}_out") for i in range(n_true)},
                    n_true / n, seed, sigma)


@dataclass
class ScalingRow:
    n: int
    matcher: str
    comparisons: int
    wall_s: float
    ratio: float  # comparisons relative to the smallest n
    wall_ratio: float


@dataclass
class ScalingResult:
    rows: list[ScalingRow]
    slopes: dict[str, float]  # least-squares slope of log(comparisons) vs log(n)
    config: dict
    build_wall_s: dict[int, float] = field(default_factory=dict)

    def to_json(self, with_timings: bool = False) -> dict:
        doc = {"slopes": self.slopes, "config": self.config,
               "rows": [{"n": r.n, "matcher": r.matcher, "comparisons": r.comparisons, "ratio": r.ratio}
                        for r in self.rows]}
        if with_timings:
            doc["wall"] = [{"n": r.n, "matcher": r.matcher, "wall_s": r.wall_s, "wall_ratio": r.wall_ratio}
                           for r in self.rows]
            doc["index_build_wall_s"] = {str(k): v for k, v in self.build_wall_s.items()}
        return doc


def loglog_slope(ns, values) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)[0])


def scaling_bench(counts: Sequence[int], sigma: float = 0.1, repetitions: int = 1, seed: int = 0,
                  n_probe: int = 8, K="auto", scenario_fn=None, tau: float = 0.5) -> ScalingResult:
    """Run both matchers at each size on fresh seeded scenarios (N = M = n)."""
    counts = list(counts)
    if len(counts) < 3 or any(b <= a for a, b in zip(counts, counts[1:])):
        raise BenchError("need at least 3 strictly ascending flow counts")
    if repetitions < 1:
        raise BenchError("repetitions must be >= 1")
    scenario_fn = scenario_fn or synthetic_scenario
    raw: dict[str, list[tuple[int, int, float]]] = {"pairwise": [], "ann": []}
    build_wall: dict[int, float] = {}
    for n in counts:
        comps = {"pairwise": [], "ann": []}
        walls = {"pairwise": [], "ann": []}
        builds = []
        for rep in range(repetitions):
            sc = scenario_fn(n, sigma, seed + rep)
            t0 = time.perf_counter()
            r = match_pairwise(sc, tau)
            walls["pairwise"].append(time.perf_counter() - t0)
            comps["pairwise"].append(r.comparisons)
            t0 = time.perf_counter()
            idx = scenario_index(sc, K=K, n_probe=n_probe, seed=seed + rep)
            builds.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            r = match_ann(sc, idx, min(n_probe, idx.K), tau)
            walls["ann"].append(time.perf_counter() - t0)
            comps["ann"].append(r.comparisons)
        build_wall[n] = float(np.median(builds))
        for m in raw:
            raw[m].append((n, int(round(np.mean(comps[m]))), float(np.median(walls[m]))))
    rows = []
    slopes = {}
    for m, series in raw.items():
        c0, w0 = series[0][1], series[0][2]
        for n, c, w in series:
            rows.append(ScalingRow(n, m, c, w, c / c0, w / w0 if w0 > 0 else math.nan))
        slopes[m] = loglog_slope([s[0] for s in series], [s[1] for s in series])
    cfg = {"counts": counts, "sigma": sigma, "repetitions": repetitions, "seed": seed,
           "n_probe": n_probe, "K": K}
    return ScalingResult(rows, slopes, cfg, build_wall)


def save_scaling(result: ScalingResult, path: str | Path) -> None:
    """``n,matcher,comparisons,wall_s,ratio`` CSV next to a JSON summary."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "matcher", "comparisons", "wall_s", "ratio"])
        for r in result.rows:
            w.writerow([r.n, r.matcher, r.comparisons, f"{r.wall_s:.6f}", f"{r.ratio:.4f}"])
    path.with_suffix(".json").write_text(json.dumps(result.to_json(with_timings=True), indent=1, sort_keys=True),
                                         encoding="utf-8")
