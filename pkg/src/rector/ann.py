"""Inverted-file (IVF) index over egress embeddings.

k-means partitions the indexed embeddings into K coarse cells; a query ranks
the centroids by Euclidean distance and scans only the ``n_probe`` nearest
posting lists, scoring candidates by cosine similarity. ``exact_search`` is
the full-scan oracle with identical scoring and ordering rules, so probing
every list reproduces it exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import derive


class BuildError(ValueError):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    distortion: list[float]  # after every Lloyd update
    n_iter: int


def sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, K) squared Euclidean distances, computed by explicit differences."""
    out = np.empty((len(points), len(centroids)))
    step = max(1, 4_000_000 // max(1, centroids.size))
    for i in range(0, len(points), step):
        diff = points[i:i + step, None, :] - centroids[None, :, :]
        out[i:i + step] = (diff * diff).sum(axis=2)
    return out


def _kmeans_pp(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = sq_dists(points, points[chosen[0]][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, sq_dists(points, points[nxt][None])[:, 0])
    return points[chosen].copy()


def _repair_empty(assign: np.ndarray, d2_own: np.ndarray, K: int) -> None:
    """Give every empty cluster the point farthest from its own centroid,
    taken from a cluster that can spare one."""
    counts = np.bincount(assign, minlength=K)
    for k in np.flatnonzero(counts == 0):
        donors = counts[assign] > 1
        if not donors.any():
            break
        cand = np.where(donors, d2_own, -np.inf)
        i = int(np.argmax(cand))
        counts[assign[i]] -= 1
        assign[i] = k
        d2_own[i] = 0.0
        counts[k] = 1


def kmeans(points, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds. Assignment ties go to the lowest
    centroid index; the returned assignments are the nearest-centroid
    assignments for the returned centroids."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("kmeans needs a non-empty (n, D) array")
    if not 1 <= K <= len(points):
        raise ValueError(f"K must lie in [1, {len(points)}], got {K}")
    rng = derive(seed, "kmeans")
    cent = _kmeans_pp(points, K, rng)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = sq_dists(points, cent)
        assign = np.argmin(d2, axis=1)
        d2_own = d2[np.arange(len(points)), assign]
        _repair_empty(assign, d2_own, K)
        new = np.zeros_like(cent)
        np.add.at(new, assign, points)
        counts = np.bincount(assign, minlength=K)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        new[~filled] = cent[~filled]
        diff = points - new[assign]
        history.append(float((diff * diff).sum()))
        shift = float(np.sqrt(((new - cent) ** 2).sum(axis=1)).max())
        cent = new
        if shift < tol:
            break
    assign = np.argmin(sq_dists(points, cent), axis=1)
    return KMeansResult(cent, assign, history, it)


# ---------------------------------------------------------------- index


@dataclass(frozen=True)
class SearchHit:
    flow_id: str
    score: float


@dataclass
class QueryResult:
    hits: list[SearchHit]
    comparisons: int
    rows: np.ndarray  # index rows of the hits, in hit order
    scores: np.ndarray


def cosine_scores(E: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Dot products of unit rows with a unit query. Each row is reduced on its
    own, so a row's score never depends on which other rows are present."""
    return (E * q).sum(axis=1)


def _rank(rows: np.ndarray, scores: np.ndarray, id_rank: np.ndarray, top_k: int | None) -> np.ndarray:
    order = np.lexsort((id_rank[rows], -scores))
    return order if top_k is None else order[:top_k]


@dataclass
class IvfIndex:
    flow_ids: list[str]
    embeddings: np.ndarray  # (M, D)
    centroids: np.ndarray  # (K, D)
    lists: list[np.ndarray]  # row indices per centroid
    n_probe_default: int = 8
    meta: dict | None = None

    def __post_init__(self):
        order = sorted(range(len(self.flow_ids)), key=lambda i: self.flow_ids[i])
        self.id_rank = np.empty(len(self.flow_ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(order))

    @property
    def K(self) -> int:
        return len(self.centroids)

    def __len__(self) -> int:
        return len(self.flow_ids)


def auto_k(M: int) -> int:
    return max(1, int(math.floor(math.sqrt(M) + 0.5)))


def nlogn_k(M: int) -> int:
    """Cluster count that keeps posting lists near log2(M) long."""
    return max(1, min(M, int(math.floor(M / max(1.0, math.log2(M)) + 0.5))))


def resolve_k(K, M: int) -> int:
    if K in (None, "auto"):
        return auto_k(M)
    if K == "nlogn":
        return nlogn_k(M)
    return int(K)


def build_index(flow_ids: Sequence[str], embeddings, K="auto", seed: int = 0,
                n_probe: int = 8, meta: dict | None = None) -> IvfIndex:
    """``K`` is an int, ``"auto"`` (round(sqrt(M))) or ``"nlogn"`` (M / log2 M)."""
    E = np.asarray(embeddings, dtype=np.float64)
    if len(flow_ids) == 0:
        raise BuildError("cannot build an index over zero embeddings")
    if E.shape[0] != len(flow_ids):
        raise BuildError("flow_ids and embeddings differ in length")
    k = resolve_k(K, len(flow_ids))
    km = kmeans(E, k, seed=seed)
    lists = [np.flatnonzero(km.assignments == c) for c in range(k)]
    return IvfIndex(list(flow_ids), E, km.centroids, lists, max(1, min(n_probe, k)), meta)


def probe_order(index: IvfIndex, q: np.ndarray) -> np.ndarray:
    d2 = sq_dists(q[None], index.centroids)[0]
    return np.argsort(d2, kind="stable")


def query(index: IvfIndex, q, n_probe: int | None = None, top_k: int | None = None) -> QueryResult:
    """Scan the ``n_probe`` nearest lists; hits by descending cosine, ties by flow_id."""
    if len(index) == 0:
        return QueryResult([], 0, np.zeros(0, np.int64), np.zeros(0))
    q = np.asarray(q, dtype=np.float64)
    n_probe = index.n_probe_default if n_probe is None else int(n_probe)
    if not 1 <= n_probe <= index.K:
        raise ValueError(f"n_probe must lie in [1, {index.K}], got {n_probe}")
    probed = probe_order(index, q)[:n_probe]
    rows = np.concatenate([index.lists[c] for c in probed])
    scores = cosine_scores(index.embeddings[rows], q)
    order = _rank(rows, scores, index.id_rank, top_k)
    rows, scores = rows[order], scores[order]
    hits = [SearchHit(index.flow_ids[r], float(s)) for r, s in zip(rows, scores)]
    return QueryResult(hits, int(sum(len(index.lists[c]) for c in probed)), rows, scores)


def exact_search(flow_ids: Sequence[str], embeddings, q, top_k: int | None = None) -> list[SearchHit]:
    """Full scan with the same scoring and ordering as :func:`query`."""
    E = np.asarray(embeddings, dtype=np.float64)
    if len(flow_ids) == 0:
        return []
    order = sorted(range(len(flow_ids)), key=lambda i: flow_ids[i])
    id_rank = np.empty(len(flow_ids), dtype=np.int64)
    id_rank[order] = np.arange(len(order))
    rows = np.arange(len(flow_ids))
    scores = cosine_scores(E, np.asarray(q, dtype=np.float64))
    keep = _rank(rows, scores, id_rank, top_k)
    return [SearchHit(flow_ids[r], float(scores[r])) for r in keep]


def recall_at_1(index: IvfIndex, queries: np.ndarray, n_probe: int) -> float:
    """Share of queries whose top probed hit equals the exact top hit."""
    agree = 0
    for q in queries:
        exact = exact_search(index.flow_ids, index.embeddings, q, top_k=1)
        approx = query(index, q, n_probe=n_probe, top_k=1).hits
        agree += bool(approx) and approx[0].flow_id == exact[0].flow_id
    return agree / len(queries)


# ---------------------------------------------------------------- file format


def save_index(index: IvfIndex, path: str | Path) -> None:
    doc = {
        "version": 1,
        "K": index.K,
        "n_probe_default": index.n_probe_default,
        "centroids": index.centroids.tolist(),
        "lists": [[[index.flow_ids[r], index.embeddings[r].tolist()] for r in lst] for lst in index.lists],
    }
    if index.meta:
        doc["meta"] = index.meta
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_index(path: str | Path) -> IvfIndex:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise ValueError(f"unsupported index version {doc.get('version')!r}")
    ids: list[str] = []
    embs: list[list[float]] = []
    lists = []
    for lst in doc["lists"]:
        rows = []
        for fid, e in lst:
            rows.append(len(ids))
            ids.append(fid)
            embs.append(e)
        lists.append(np.array(rows, dtype=np.int64))
    cent = np.asarray(doc["centroids"], dtype=np.float64)
    if len(lists) != doc["K"] or len(cent) != doc["K"]:
        raise ValueError("index file K does not match its centroids/lists")
    E = np.asarray(embs, dtype=np.float64).reshape(len(ids), -1) if ids else np.zeros((0, cent.shape[1]))
    return IvfIndex(ids, E, cent, lists, int(doc["n_probe_default"]), doc.get("meta"))
