"""Flow encoder: per-window two-layer GRU, attention-MIL pooling over
windows, a linear projection and L2 normalization, with exact reverse-mode
gradients.

All window sequences of a batch are run together. Sequences are sorted by
length once, so at every time step the still-running ones form a prefix and
finished ones simply keep their last hidden state; padding rows are never
fed to the recurrence. Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .features import FeatureTensor
from .rng import derive

NORM_EPS = 1e-12
GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


class ContractError(ValueError):
    pass


def sigmoid(x):
    # exp overflow -> inf -> 0.0 is the correct limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------- parameters


@dataclass
class GruLayerParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def H(self) -> int:
        return self.U_z.shape[0]

    @property
    def I(self) -> int:
        return self.W_z.shape[1]

    def check(self) -> None:
        H, I = self.H, self.I
        for name in GRU_NAMES:
            a = getattr(self, name)
            want = (H, I) if name[0] == "W" else (H, H) if name[0] == "U" else (H,)
            if a.shape != want:
                raise ContractError(f"GRU {name} has shape {a.shape}, expected {want}")


@dataclass
class AttentionParams:
    V: np.ndarray  # (A, H)
    w: np.ndarray  # (A,)


@dataclass
class ModelParams:
    gru1: GruLayerParams
    gru2: GruLayerParams
    attn: AttentionParams
    P: np.ndarray  # (D, H)
    b_P: np.ndarray  # (D,)

    @property
    def dims(self) -> dict[str, int]:
        return {"H": self.gru1.H, "A": self.attn.V.shape[0], "D": self.P.shape[0]}

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in ("gru1", "gru2"):
            lp = getattr(self, layer)
            for name in GRU_NAMES:
                yield f"{layer}.{name}", getattr(lp, name)
        yield "attn.V", self.attn.V
        yield "attn.w", self.attn.w
        yield "P", self.P
        yield "b_P", self.b_P

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams(
            gru1=GruLayerParams(*(fn(getattr(self.gru1, n)) for n in GRU_NAMES)),
            gru2=GruLayerParams(*(fn(getattr(self.gru2, n)) for n in GRU_NAMES)),
            attn=AttentionParams(fn(self.attn.V), fn(self.attn.w)),
            P=fn(self.P),
            b_P=fn(self.b_P),
        )

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def get(self, name: str) -> np.ndarray:
        for n, a in self.named_arrays():
            if n == name:
                return a
        raise KeyError(name)

    def check(self) -> None:
        self.gru1.check()
        self.gru2.check()
        H = self.gru1.H
        if self.gru2.I != H or self.gru2.H != H:
            raise ContractError("second GRU layer must map H -> H")
        A = self.attn.V.shape[0]
        if self.attn.V.shape != (A, H) or self.attn.w.shape != (A,):
            raise ContractError("attention shapes inconsistent")
        D = self.P.shape[0]
        if self.P.shape != (D, H) or self.b_P.shape != (D,):
            raise ContractError("projection shapes inconsistent")
        for name, a in self.named_arrays():
            if not np.all(np.isfinite(a)):
                raise ContractError(f"{name} has non-finite entries")


def init_params(H: int = 32, A: int = 16, D: int = 32, seed: int = 0, I: int = 2) -> ModelParams:
    """Uniform(-s, s) with s = 1/sqrt(fan_in); GRU biases use the layer's H."""
    rng = derive(seed, "init")

    def u(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    def layer(i):
        return GruLayerParams(
            W_z=u((H, i), i), W_r=u((H, i), i), W_h=u((H, i), i),
            U_z=u((H, H), H), U_r=u((H, H), H), U_h=u((H, H), H),
            b_z=u(H, H), b_r=u(H, H), b_h=u(H, H),
        )

    return ModelParams(
        gru1=layer(I),
        gru2=layer(H),
        attn=AttentionParams(V=u((A, H), H), w=u(A, A)),
        P=u((D, H), H),
        b_P=u(D, H),
    )


def zero_params(H: int = 32, A: int = 16, D: int = 32, I: int = 2) -> ModelParams:
    return init_params(H, A, D, 0, I).zeros_like()


# ---------------------------------------------------------------- single-sequence ops


def _gru_step(p: GruLayerParams, x, h):
    z = sigmoid(x @ p.W_z.T + h @ p.U_z.T + p.b_z)
    r = sigmoid(x @ p.W_r.T + h @ p.U_r.T + p.b_r)
    hh = np.tanh(x @ p.W_h.T + (r * h) @ p.U_h.T + p.b_h)
    return (1.0 - z) * h + z * hh, z, r, hh


def gru_forward(layer: GruLayerParams, xs: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Run one GRU layer over ``xs`` (T x I); returns the T hidden states."""
    layer.check()
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != layer.I or xs.shape[0] < 1:
        raise ContractError(f"inputs must be T x {layer.I} with T >= 1, got {xs.shape}")
    h = np.zeros(layer.H) if h0 is None else np.asarray(h0, dtype=np.float64)
    if h.shape != (layer.H,):
        raise ContractError(f"h0 must have shape ({layer.H},), got {h.shape}")
    out = np.empty((xs.shape[0], layer.H))
    for t, x in enumerate(xs):
        h = _gru_step(layer, x, h)[0]
        out[t] = h
    return out


def encode_window(params: ModelParams, window: np.ndarray, valid_len: int) -> np.ndarray:
    """Final layer-2 hidden state over the first ``valid_len`` rows (one zero
    step for an empty window)."""
    x = np.asarray(window, dtype=np.float64)
    x = x[:int(valid_len)] if valid_len > 0 else np.zeros((1, x.shape[1]))
    return gru_forward(params.gru2, gru_forward(params.gru1, x))[-1]


def attention_pool(attn: AttentionParams, hs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over ``w . tanh(V h_k)``; returns (pooled vector, weights)."""
    hs = np.asarray(hs, dtype=np.float64)
    if hs.ndim != 2 or hs.shape[0] < 1:
        raise ContractError("need at least one instance vector")
    z, a, _ = _attend(attn, hs[None])
    return z[0], a[0]


def _attend(attn: AttentionParams, enc: np.ndarray):
    u = np.tanh(enc @ attn.V.T)  # (B, W, A)
    s = u @ attn.w  # (B, W)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=1, keepdims=True)
    z = np.einsum("bw,bwh->bh", a, enc)
    return z, a, u


# ---------------------------------------------------------------- batched forward / backward


@dataclass
class _LayerTrace:
    """Packed per-step activations: rows ``off[t]:off[t+1]`` belong to step t."""

    x: np.ndarray  # (R, I) inputs
    hp: np.ndarray  # (R, H) previous hidden state
    z: np.ndarray
    r: np.ndarray
    hh: np.ndarray  # candidate state
    hn: np.ndarray  # new hidden state


@dataclass
class ForwardCache:
    B: int
    W: int
    order: np.ndarray  # sorted position -> sequence index
    off: np.ndarray  # packed row offsets per step
    layer1: _LayerTrace
    layer2: _LayerTrace
    enc: np.ndarray  # (B, W, H) window encodings
    u: np.ndarray  # (B, W, A) tanh attention features
    a: np.ndarray  # (B, W) attention weights
    pooled: np.ndarray  # (B, H)
    pre: np.ndarray  # (B, D) before normalization
    norm: np.ndarray  # (B,)
    emb: np.ndarray  # (B, D)


def _packed_layer(p: GruLayerParams, x: np.ndarray, off: np.ndarray, S: int):
    H = p.H
    gx = x @ np.concatenate([p.W_z, p.W_r, p.W_h]).T + np.concatenate([p.b_z, p.b_r, p.b_h])
    U_zr = np.concatenate([p.U_z, p.U_r]).T
    U_hT = p.U_h.T
    R = x.shape[0]
    hp_all = np.empty((R, H))
    z_all = np.empty((R, H))
    r_all = np.empty((R, H))
    hh_all = np.empty((R, H))
    hn_all = np.empty((R, H))
    h = np.zeros((S, H))
    for t in range(len(off) - 1):
        a, b = off[t], off[t + 1]
        n = b - a
        hp = h[:n]
        g = gx[a:b]
        zr = sigmoid(g[:, :2 * H] + hp @ U_zr)
        z, r = zr[:, :H], zr[:, H:]
        hh = np.tanh(g[:, 2 * H:] + (r * hp) @ U_hT)
        hn = (1.0 - z) * hp + z * hh
        hp_all[a:b] = hp
        z_all[a:b] = z
        r_all[a:b] = r
        hh_all[a:b] = hh
        hn_all[a:b] = hn
        h[:n] = hn
    return h, _LayerTrace(x, hp_all, z_all, r_all, hh_all, hn_all)


def embed_batch(params: ModelParams, values: np.ndarray, valid_len: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Embed B flows at once. ``values`` is (B, W, L, 2), ``valid_len`` (B, W)."""
    values = np.asarray(values, dtype=np.float64)
    B, W, L, _ = values.shape
    S = B * W
    eff = np.maximum(np.asarray(valid_len).reshape(S), 1)
    if np.any(eff > L):
        raise ContractError("valid_len exceeds L")
    order = np.argsort(-eff, kind="stable")
    seqs = values.reshape(S, L, 2)[order]
    # an empty window steps once on an all-zero row, whatever its padding holds
    seqs[np.asarray(valid_len).reshape(S)[order] <= 0, 0] = 0.0
    eff_sorted = eff[order]
    T = int(eff_sorted[0])
    # lengths are sorted descending, so the sequences still running at step t are a prefix
    n_active = (eff_sorted[None, :] > np.arange(T)[:, None]).sum(axis=1)
    off = np.concatenate([[0], np.cumsum(n_active)])
    x1 = np.concatenate([seqs[:n, t] for t, n in enumerate(n_active)])

    _, tr1 = _packed_layer(params.gru1, x1, off, S)
    h2, tr2 = _packed_layer(params.gru2, tr1.hn, off, S)
    enc = np.empty_like(h2)
    enc[order] = h2
    enc = enc.reshape(B, W, -1)

    pooled, a, u = _attend(params.attn, enc)
    pre = pooled @ params.P.T + params.b_P
    norm = np.linalg.norm(pre, axis=1)
    emb = np.zeros_like(pre)
    degenerate = norm < NORM_EPS  # NaN norms are not degenerate and propagate
    ok = ~degenerate
    emb[ok] = pre[ok] / norm[ok, None]
    # degenerate all-zero direction: fixed to the first basis vector
    emb[degenerate, 0] = 1.0
    cache = ForwardCache(B, W, order, off, tr1, tr2, enc, u, a, pooled, pre, norm, emb)
    return emb, cache


def _packed_layer_backward(p: GruLayerParams, tr: _LayerTrace, off, g_final, g_steps, want_gx: bool):
    """Backprop one layer. ``g_final`` is the gradient on the last hidden state of
    every sequence, ``g_steps`` (packed, optional) the gradient on each step's output."""
    H = p.H
    R = tr.x.shape[0]
    d_pre = np.empty((R, 3 * H))  # gradients on z, r and candidate pre-activations
    U_zr = np.concatenate([p.U_z, p.U_r])
    U_h = p.U_h
    gh = g_final.copy()
    for t in range(len(off) - 2, -1, -1):
        a, b = off[t], off[t + 1]
        n = b - a
        gt = gh[:n]
        if g_steps is not None:
            gt = gt + g_steps[a:b]
        hp, z, r, hh = tr.hp[a:b], tr.z[a:b], tr.r[a:b], tr.hh[a:b]
        gah = gt * z * (1.0 - hh * hh)
        grh = gah @ U_h
        gaz = gt * (hh - hp) * z * (1.0 - z)
        gar = grh * hp * r * (1.0 - r)
        d_pre[a:b, :H] = gaz
        d_pre[a:b, H:2 * H] = gar
        d_pre[a:b, 2 * H:] = gah
        gh[:n] = gt * (1.0 - z) + grh * r + d_pre[a:b, :2 * H] @ U_zr
    d_zr, d_h = d_pre[:, :2 * H], d_pre[:, 2 * H:]
    gW = d_pre.T @ tr.x
    gb = d_pre.sum(axis=0)
    gU_zr = d_zr.T @ tr.hp
    gU_h = d_h.T @ (tr.r * tr.hp)
    grads = GruLayerParams(
        W_z=gW[:H], W_r=gW[H:2 * H], W_h=gW[2 * H:],
        U_z=gU_zr[:H], U_r=gU_zr[H:], U_h=gU_h,
        b_z=gb[:H], b_r=gb[H:2 * H], b_h=gb[2 * H:],
    )
    gx = d_pre @ np.concatenate([p.W_z, p.W_r, p.W_h]) if want_gx else None
    return grads, gx


def backward_batch(params: ModelParams, cache: ForwardCache, grad_emb: np.ndarray) -> ModelParams:
    """Gradient of ``sum_b grad_emb[b] . emb[b]`` with respect to every parameter."""
    grad_emb = np.asarray(grad_emb, dtype=np.float64)
    if grad_emb.shape != cache.emb.shape:
        raise ContractError(f"grad_embedding shape {grad_emb.shape} != {cache.emb.shape}")
    emb, norm = cache.emb, cache.norm
    ok = ~(norm < NORM_EPS)
    g_pre = np.zeros_like(grad_emb)
    proj = (emb[ok] * grad_emb[ok]).sum(axis=1, keepdims=True)
    g_pre[ok] = (grad_emb[ok] - emb[ok] * proj) / norm[ok, None]

    gP = g_pre.T @ cache.pooled
    gbP = g_pre.sum(axis=0)
    g_pool = g_pre @ params.P  # (B, H)

    enc, a, u = cache.enc, cache.a, cache.u
    g_enc = a[:, :, None] * g_pool[:, None, :]
    g_a = np.einsum("bh,bwh->bw", g_pool, enc)
    g_s = a * (g_a - (a * g_a).sum(axis=1, keepdims=True))
    g_w = np.einsum("bw,bwa->a", g_s, u)
    g_u = g_s[:, :, None] * params.attn.w
    g_pre_att = g_u * (1.0 - u * u)
    g_V = np.einsum("bwa,bwh->ah", g_pre_att, enc)
    g_enc += g_pre_att @ params.attn.V

    S = cache.B * cache.W
    g_final = g_enc.reshape(S, -1)[cache.order]
    g2, gx2 = _packed_layer_backward(params.gru2, cache.layer2, cache.off, g_final, None, True)
    g1, _ = _packed_layer_backward(params.gru1, cache.layer1, cache.off, np.zeros_like(g_final), gx2, False)
    return ModelParams(g1, g2, AttentionParams(g_V, g_w), gP, gbP)


def embed_flow(params: ModelParams, ft: FeatureTensor) -> tuple[np.ndarray, ForwardCache]:
    emb, cache = embed_batch(params, ft.values[None], np.asarray(ft.valid_len)[None])
    return emb[0], cache


def backward(params: ModelParams, cache: ForwardCache, grad_embedding: np.ndarray) -> ModelParams:
    return backward_batch(params, cache, np.asarray(grad_embedding, dtype=np.float64).reshape(cache.B, -1))


def embed_many(params: ModelParams, values: np.ndarray, valid_len: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Forward-only embeddings for a large set of flows."""
    out = [embed_batch(params, values[i:i + chunk], valid_len[i:i + chunk])[0]
           for i in range(0, len(values), chunk)]
    return np.concatenate(out) if out else np.zeros((0, params.P.shape[0]))


# ---------------------------------------------------------------- gradient check


def finite_diff_check(
    params: ModelParams,
    ft: FeatureTensor,
    seed: int = 0,
    n_coords: int = 200,
    step: float = 1e-5,
    floor: float = 1e-4,
    backward_fn=None,
) -> float:
    """Max relative error between ``backward`` and central differences of
    ``g . embed(params)`` for a seeded random direction ``g``.

    At least ``n_coords`` coordinates are checked, spread over every
    parameter array. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    backward_fn = backward_fn or backward
    rng = derive(seed, "fdcheck")
    D = params.P.shape[0]
    g = rng.normal(size=D)
    _, cache = embed_flow(params, ft)
    analytic = backward_fn(params, cache, g)

    names = [n for n, _ in params.named_arrays()]
    per_array = -(-n_coords // len(names))
    work = params.copy()
    worst = 0.0
    for name in names:
        arr = work.get(name)
        flat = arr.reshape(-1)
        k = min(per_array, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        grad = analytic.get(name).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(g @ embed_flow(work, ft)[0])
            flat[i] = orig - step
            fm = float(g @ embed_flow(work, ft)[0])
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            ana = float(grad[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints


def params_to_json(params: ModelParams) -> dict:
    return {name: a.tolist() for name, a in params.named_arrays()}


def params_from_json(obj: dict, H: int, A: int, D: int, I: int = 2) -> ModelParams:
    template = zero_params(H, A, D, I)
    out = template.copy()
    for name, a in out.named_arrays():
        if name not in obj:
            raise ContractError(f"checkpoint is missing {name}")
        arr = np.asarray(obj[name], dtype=np.float64)
        if arr.shape != a.shape:
            raise ContractError(f"checkpoint {name} has shape {arr.shape}, expected {a.shape}")
        a[...] = arr
    out.check()
    return out


def save_checkpoint(path: str | Path, towers: dict[str, ModelParams], W: int, L: int,
                    tied: bool = False, extra: dict | None = None) -> None:
    """Write both encoder towers (``ingress``/``egress``) as one JSON document."""
    dims = dict(next(iter(towers.values())).dims, W=W, L=L)
    doc = {"version": 1, "dims": dims, "tied": tied, "params": {}}
    for role, p in towers.items():
        for name, a in p.named_arrays():
            doc["params"][f"{role}/{name}"] = a.tolist()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path, expect: dict[str, int] | None = None) -> tuple[dict[str, ModelParams], dict]:
    """Returns ``({role: params}, document)``; ``expect`` dims must match."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise ContractError(f"unsupported checkpoint version {doc.get('version')!r}")
    dims = doc["dims"]
    for k, v in (expect or {}).items():
        if dims.get(k) != v:
            raise ContractError(f"checkpoint dimension {k}={dims.get(k)} does not match expected {v}")
    roles = sorted({k.split("/", 1)[0] for k in doc["params"]})
    towers = {}
    for role in roles:
        sub = {k.split("/", 1)[1]: v for k, v in doc["params"].items() if k.startswith(role + "/")}
        towers[role] = params_from_json(sub, dims["H"], dims["A"], dims["D"])
    return towers, doc
