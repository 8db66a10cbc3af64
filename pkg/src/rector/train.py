"""Siamese triplet training of the ingress/egress encoder towers.

Anchors are ingress flows, positives the egress flow of the same session and
negatives egress flows of other sessions. Distances are cosine distances
``1 - u.v`` on unit embeddings, the same measure used at matching time.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .features import FeatureStore, FeatureTensor
from .nn import ModelParams, backward_batch, embed_batch, embed_many, init_params
from .rng import derive

log = logging.getLogger(__name__)

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


class SamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    H: int = 32
    A: int = 16
    D: int = 32
    tied: bool = False


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    target_loss: float = 0.004
    hard_negative_frac: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.target_loss < 0:
            raise ValueError("target_loss must be >= 0")
        if not 0.0 <= self.hard_negative_frac <= 1.0:
            raise ValueError("hard_negative_frac must lie in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


# ---------------------------------------------------------------- loss


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, m: float):
    """Hinge ``max(0, d(a,p) - d(a,n) + m)`` with ``d(u,v) = 1 - u.v``.

    Returns ``(loss, grad_a, grad_p, grad_n)``; gradients are zero when the
    hinge is inactive.
    """
    loss, ga, gp, gn = triplet_loss_batch(np.atleast_2d(a), np.atleast_2d(p), np.atleast_2d(n), m)
    return float(loss[0]), ga[0], gp[0], gn[0]


def triplet_loss_batch(A: np.ndarray, P: np.ndarray, N: np.ndarray, m: float):
    d_ap = 1.0 - (A * P).sum(axis=1)
    d_an = 1.0 - (A * N).sum(axis=1)
    raw = d_ap - d_an + m
    active = (raw > 0)[:, None]
    loss = np.maximum(raw, 0.0)  # NaN propagates
    ga = np.where(active, N - P, 0.0)
    gp = np.where(active, -A, 0.0)
    gn = np.where(active, A, 0.0)
    return loss, ga, gp, gn


# ---------------------------------------------------------------- sampling


@dataclass
class Triplet:
    anchor: FeatureTensor
    positive: FeatureTensor
    negative: FeatureTensor
    anchor_id: str
    positive_id: str
    negative_id: str
    session_id: str
    negative_session_id: str


@dataclass
class PairTable:
    """Row indices of the complete (ingress, egress) sessions of a feature store."""

    sessions: list[str]
    ingress_rows: np.ndarray
    egress_rows: np.ndarray

    @classmethod
    def from_store(cls, store: FeatureStore) -> "PairTable":
        by_session: dict[str, dict[str, int]] = {}
        for i, (s, r) in enumerate(zip(store.sessions, store.roles)):
            by_session.setdefault(s, {})[r] = i
        sessions = sorted(s for s, roles in by_session.items() if len(roles) == 2)
        if len(sessions) < 2:
            raise SamplingError(f"need at least 2 complete sessions, found {len(sessions)}")
        return cls(
            sessions,
            np.array([by_session[s]["ingress"] for s in sessions], dtype=np.int64),
            np.array([by_session[s]["egress"] for s in sessions], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.sessions)


def semi_hard_negatives(anchor_emb: np.ndarray, egress_emb: np.ndarray) -> np.ndarray:
    """For every anchor, the nearest non-matching egress that is still farther
    away than the anchor's own positive; -1 where no such egress exists.
    Ties go to the lowest index."""
    sim = anchor_emb @ egress_emb.T
    pos = np.diag(sim).copy()
    np.fill_diagonal(sim, -np.inf)
    sim[sim >= pos[:, None]] = -np.inf
    best = np.argmax(sim, axis=1)
    best[~np.isfinite(sim[np.arange(len(sim)), best])] = -1
    return best


def sample_negatives(anchors: np.ndarray, n_sessions: int, rng: np.random.Generator,
                     hard_negative_frac: float, hard: np.ndarray | None) -> np.ndarray:
    k = len(anchors)
    uniform = rng.integers(0, n_sessions - 1, size=k)
    uniform += uniform >= anchors  # skip the anchor's own session
    use_hard = rng.random(k) < hard_negative_frac
    if hard is None:
        return uniform
    mined = hard[anchors]
    return np.where(use_hard & (mined >= 0), mined, uniform)


def sample_triplets(
    store: FeatureStore,
    batch: int,
    rng: np.random.Generator,
    hard_negative_frac: float = 0.0,
    hard: np.ndarray | None = None,
    pairs: PairTable | None = None,
    anchors: np.ndarray | None = None,
) -> list[Triplet]:
    """Draw ``batch`` triplets. Anchors are uniform over complete sessions
    unless given; a ``hard_negative_frac`` share of negatives comes from the
    ``hard`` table (see :func:`semi_hard_negatives`), the rest uniformly from
    the other sessions' egress flows."""
    pairs = pairs or PairTable.from_store(store)
    n = len(pairs)
    if anchors is None:
        anchors = rng.integers(0, n, size=batch)
    negs = sample_negatives(np.asarray(anchors), n, rng, hard_negative_frac, hard)
    out = []
    for i, j in zip(anchors, negs):
        ai, pi, ni = pairs.ingress_rows[i], pairs.egress_rows[i], pairs.egress_rows[j]
        out.append(Triplet(
            anchor=FeatureTensor(store.values[ai], store.valid_len[ai]),
            positive=FeatureTensor(store.values[pi], store.valid_len[pi]),
            negative=FeatureTensor(store.values[ni], store.valid_len[ni]),
            anchor_id=store.flow_ids[ai],
            positive_id=store.flow_ids[pi],
            negative_id=store.flow_ids[ni],
            session_id=pairs.sessions[i],
            negative_session_id=pairs.sessions[j],
        ))
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    params: dict[str, ModelParams]  # "ingress" / "egress"; the same object when tied
    m: dict[str, ModelParams]
    v: dict[str, ModelParams]
    step: int = 0
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    wall_history: list[float] = field(default_factory=list)

    @property
    def params_ingress(self) -> ModelParams:
        return self.params["ingress"]

    @property
    def params_egress(self) -> ModelParams:
        return self.params["egress"]


def init_state(model: ModelConfig, seed: int) -> TrainState:
    ing = init_params(model.H, model.A, model.D, seed=seed * 2 + 1)
    egr = ing if model.tied else init_params(model.H, model.A, model.D, seed=seed * 2 + 2)
    params = {"ingress": ing, "egress": egr}
    uniq = _unique(params)
    m = {k: p.zeros_like() for k, p in uniq.items()}
    v = {k: p.zeros_like() for k, p in uniq.items()}
    return TrainState(params, m, v)


def _unique(params: dict[str, ModelParams]) -> dict[str, ModelParams]:
    if params["ingress"] is params["egress"]:
        return {"ingress": params["ingress"]}
    return dict(params)


def adam_update(p: ModelParams, g: ModelParams, m: ModelParams, v: ModelParams, lr: float, step: int) -> None:
    c1 = 1.0 - ADAM_B1 ** step
    c2 = 1.0 - ADAM_B2 ** step
    for (_, pa), (_, ga), (_, ma), (_, va) in zip(p.named_arrays(), g.named_arrays(),
                                                  m.named_arrays(), v.named_arrays()):
        ma *= ADAM_B1
        ma += (1.0 - ADAM_B1) * ga
        va *= ADAM_B2
        va += (1.0 - ADAM_B2) * ga * ga
        pa -= lr * (ma / c1) / (np.sqrt(va / c2) + ADAM_EPS)


def _add(a: ModelParams, b: ModelParams) -> ModelParams:
    out = a.copy()
    for (_, x), (_, y) in zip(out.named_arrays(), b.named_arrays()):
        x += y
    return out


def batch_step(state: TrainState, store: FeatureStore, pairs: PairTable, anchors: np.ndarray,
               negs: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """One optimizer step on the given triplets; returns their pre-update losses."""
    ai = pairs.ingress_rows[anchors]
    pi = pairs.egress_rows[anchors]
    ni = pairs.egress_rows[negs]
    k = len(anchors)
    ing, egr = state.params["ingress"], state.params["egress"]
    tied = ing is egr
    if tied:
        rows = np.concatenate([ai, pi, ni])
        emb, cache = embed_batch(ing, store.values[rows], store.valid_len[rows])
        A, P, N = emb[:k], emb[k:2 * k], emb[2 * k:]
    else:
        A, cache_a = embed_batch(ing, store.values[ai], store.valid_len[ai])
        rows = np.concatenate([pi, ni])
        emb, cache_pn = embed_batch(egr, store.values[rows], store.valid_len[rows])
        P, N = emb[:k], emb[k:]
    losses, ga, gp, gn = triplet_loss_batch(A, P, N, cfg.margin)
    scale = 1.0 / k
    if tied:
        grads = {"ingress": backward_batch(ing, cache, np.concatenate([ga, gp, gn]) * scale)}
    else:
        grads = {
            "ingress": backward_batch(ing, cache_a, ga * scale),
            "egress": backward_batch(egr, cache_pn, np.concatenate([gp, gn]) * scale),
        }
    state.step += 1
    for role, g in grads.items():
        adam_update(state.params[role], g, state.m[role], state.v[role], cfg.learning_rate, state.step)
    return losses


def mine_hard_negatives(state: TrainState, store: FeatureStore, pairs: PairTable) -> np.ndarray:
    A = embed_many(state.params["ingress"], store.values[pairs.ingress_rows], store.valid_len[pairs.ingress_rows])
    E = embed_many(state.params["egress"], store.values[pairs.egress_rows], store.valid_len[pairs.egress_rows])
    return semi_hard_negatives(A, E)


def train(
    store: FeatureStore,
    cfg: TrainConfig = TrainConfig(),
    model: ModelConfig = ModelConfig(),
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Mini-batch Adam on the triplet loss until the epoch-mean loss reaches
    ``cfg.target_loss`` or ``cfg.max_epochs`` epochs have run."""
    pairs = PairTable.from_store(store)
    state = state or init_state(model, cfg.seed)
    n = len(pairs)
    while state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        rng = derive(cfg.seed, "epoch", state.epoch)
        hard = mine_hard_negatives(state, store, pairs) if cfg.hard_negative_frac > 0 else None
        perm = rng.permutation(n)
        total = 0.0
        for b in range(0, n, cfg.batch_size):
            anchors = perm[b:b + cfg.batch_size]
            negs = sample_negatives(anchors, n, rng, cfg.hard_negative_frac, hard)
            total += float(batch_step(state, store, pairs, anchors, negs, cfg).sum())
        mean_loss = total / n
        state.epoch += 1
        if not math.isfinite(mean_loss):
            raise TrainingError(f"training diverged at epoch {state.epoch} (loss {mean_loss})")
        state.loss_history.append(mean_loss)
        state.wall_history.append(time.perf_counter() - t0)
        log.info("epoch %d mean_loss %.5f (%.1fs)", state.epoch, mean_loss, state.wall_history[-1])
        if on_epoch is not None:
            on_epoch(state)
        if mean_loss <= cfg.target_loss:
            break
    return state


def write_training_log(state: TrainState, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "wall_seconds"])
        for i, (loss, wall) in enumerate(zip(state.loss_history, state.wall_history), start=1):
            w.writerow([i, repr(loss), f"{wall:.3f}"])
