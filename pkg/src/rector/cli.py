"""``rector`` command line: one subcommand per pipeline stage.

Artifacts live under ``paths.workdir`` (default ``run/``). Every artifact
records the hash of the config sections that determined it; downstream
commands recompute that hash from their own config and refuse to consume
a mismatched artifact unless ``--force`` is given.

Exit codes: 0 success, 1 internal fault, 2 missing input, 3 invariant
violation or config/hash mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import plots
from .ann import BuildError, build_index, load_index, save_index
from .evaluate import (BenchError, EmbeddingSet, ScenarioError, SweepError, Scenario, build_scenario, evaluate,
                       load_embeddings, match_ann, match_pairwise, save_embeddings, save_report, save_scaling,
                       scaling_bench, scenario_index)
from .features import WindowSpec, featurize_dataset, load_features, save_features
from .nn import ContractError, embed_many, load_checkpoint, save_checkpoint
from .train import ModelConfig, SamplingError, TrainConfig, TrainingError, train, write_training_log
from .traffic import (ConfigError, SplitError, SynthConfig, gen_synthetic, load_dataset, save_dataset,
                      split_by_circuit, stable_hash, validate_dataset)

log = logging.getLogger("rector")

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "paths.workdir": "run",
    "gen.circuits": 40,
    "gen.websites": 20,
    "gen.visits": 1,
    "gen.mean_latency_s": 0.08,
    "gen.latency_jitter_s": 0.02,
    "gen.drop_prob": 0.02,
    "gen.cell_bytes": 512,
    "gen.duration_cap_s": 60.0,
    "split.train_fraction": 0.9,
    "window.W": 10,
    "window.window_s": 5.0,
    "window.L": 100,
    "model.H": 32,
    "model.A": 16,
    "model.D": 32,
    "model.tied": False,
    "train.margin": 0.2,
    "train.learning_rate": 1e-3,
    "train.batch_size": 64,
    "train.max_epochs": 50,
    "train.target_loss": 0.004,
    "train.hard_negative_frac": 0.5,
    "train.checkpoint_every": 0,
    "index.K": "auto",
    "index.n_probe": 8,
    "scenario.N": 200,
    "scenario.M": 200,
    "scenario.sigmas": "0.1,0.3,0.5,0.8,1.0",
    "scenario.tau": 0.5,
    "scenario.top_k": "none",
    "scenario.matcher": "pairwise",
    "bench.counts": "100,250,500,1000,2000",
    "bench.sigma": 0.1,
    "bench.repetitions": 1,
    "bench.K": "nlogn",
    "bench.n_probe": 8,
}

# config sections that determine each stage's output, cumulatively
STAGE_SECTIONS = {
    "gen": ("gen",),
    "split": ("gen", "split"),
    "featurize": ("gen", "split", "window"),
    "train": ("gen", "split", "window", "model", "train"),
    "embed": ("gen", "split", "window", "model", "train"),
    "index": ("gen", "split", "window", "model", "train", "index"),
    "eval": ("gen", "split", "window", "model", "train", "index", "scenario"),
}


class CliError(Exception):
    code = 1


class MissingInput(CliError):
    code = 2


class InvariantViolation(CliError):
    code = 3


INVARIANT_ERRORS = (ConfigError, SplitError, ScenarioError, SweepError, BenchError, BuildError,
                    SamplingError, ContractError, TrainingError)


# ---------------------------------------------------------------- config


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    """Flat ``section.key = value`` lines; ``#`` starts a comment."""
    out: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        self.values.update(values or {})

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, object] | None = None) -> "RunConfig":
        vals: dict[str, object] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise MissingInput(f"config file not found: {p}")
            vals.update(parse_config_text(p.read_text(encoding="utf-8")))
        vals.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(vals)

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict[str, object]:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def stage_hash(self, stage: str) -> str:
        return stable_hash({s: self.section(s) for s in STAGE_SECTIONS[stage]})

    @property
    def workdir(self) -> Path:
        return Path(str(self["paths.workdir"]))

    def synth(self, seed: int) -> SynthConfig:
        g = self.section("gen")
        return SynthConfig(n_circuits=g["circuits"], n_websites=g["websites"], visits_per_pair=g["visits"],
                           mean_latency_s=g["mean_latency_s"], latency_jitter_s=g["latency_jitter_s"],
                           drop_prob=g["drop_prob"], cell_bytes=g["cell_bytes"],
                           duration_cap_s=g["duration_cap_s"], seed=seed)

    def window(self) -> WindowSpec:
        w = self.section("window")
        return WindowSpec(W=w["W"], window_s=w["window_s"], L=w["L"])

    def model(self) -> ModelConfig:
        m = self.section("model")
        return ModelConfig(H=m["H"], A=m["A"], D=m["D"], tied=m["tied"])

    def train_cfg(self, seed: int) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(margin=t["margin"], learning_rate=t["learning_rate"], batch_size=t["batch_size"],
                           max_epochs=t["max_epochs"], target_loss=t["target_loss"],
                           hard_negative_frac=t["hard_negative_frac"], seed=seed)

    def index_k(self, key: str = "index.K"):
        k = str(self[key])
        return k if k in ("auto", "nlogn") else int(k)

    def sigmas(self) -> list[float]:
        out = [float(s) for s in str(self["scenario.sigmas"]).split(",") if s.strip()]
        bad = [s for s in out if not 0.0 < s <= 1.0]
        if bad:
            raise ConfigError(f"sigma values must lie in (0, 1]: {bad}")
        return out


def worker_count() -> int:
    cap = os.environ.get("RECTOR_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"RECTOR_THREADS must be an integer, got {cap!r}") from None
    return n


# ---------------------------------------------------------------- artifact helpers


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"missing {what}: {path}")
    return path


def _check_hash(recorded: str | None, expected: str, path: Path, force: bool) -> None:
    if recorded == expected:
        return
    msg = f"{path}: config hash {recorded} does not match current config {expected}"
    if force:
        log.warning("%s (continuing: --force)", msg)
        return
    raise InvariantViolation(msg + " (rerun the upstream stage or pass --force)")


def _paths(cfg: RunConfig) -> dict[str, Path]:
    w = cfg.workdir
    return {
        "dataset": w / "dataset.jsonl",
        "train": w / "train.jsonl",
        "test": w / "test.jsonl",
        "features_train": w / "features" / "train.feat",
        "features_test": w / "features" / "test.feat",
        "checkpoint": w / "model.json",
        "training_log": w / "training_log.csv",
        "embeddings": w / "embeddings.jsonl",
        "index": w / "index.json",
        "match": w / "match",
        "reports": w / "reports",
        "bench": w / "bench",
    }


def _load_checked_dataset(path: Path, cfg: RunConfig, stage: str, force: bool):
    ds = load_dataset(_need(path, "dataset"))
    _check_hash(ds.meta.get("stage_hash"), cfg.stage_hash(stage), path, force)
    bad = validate_dataset(ds)
    if bad:
        raise InvariantViolation(f"{path}: {len(bad)} dataset violations, first: {bad[0]}")
    return ds


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    sc = cfg.synth(args.seed)
    sc.validate()
    ds = gen_synthetic(sc)
    ds.meta["stage_hash"] = cfg.stage_hash("gen")
    bad = validate_dataset(ds)
    if bad:
        raise InvariantViolation(f"generated dataset violates {bad[0]}")
    out = Path(args.output) if args.output else paths["dataset"]
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    log.info("wrote %d flows to %s", len(ds.flows), out)
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    src = Path(args.input) if args.input else paths["dataset"]
    ds = _load_checked_dataset(src, cfg, "gen", args.force)
    tr, te = split_by_circuit(ds, float(cfg["split.train_fraction"]), args.seed)
    h = cfg.stage_hash("split")
    for part, key in ((tr, "train"), (te, "test")):
        part.meta["stage_hash"] = h
        save_dataset(part, paths[key])
    log.info("split %d circuits: %d train / %d test", len(ds.circuits()), len(tr.circuits()), len(te.circuits()))
    return 0


def cmd_featurize(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    spec = cfg.window()
    h = cfg.stage_hash("featurize")
    for part in (["train", "test"] if args.split == "both" else [args.split]):
        ds = _load_checked_dataset(paths[part], cfg, "split", args.force)
        store = featurize_dataset(ds.flows, spec, {"stage_hash": h, "split": part})
        out = paths[f"features_{part}"]
        out.parent.mkdir(parents=True, exist_ok=True)
        save_features(store, out)
        log.info("featurized %d %s flows to %s", len(store), part, out)
    return 0


def _load_checked_features(path: Path, cfg: RunConfig, force: bool):
    store = load_features(_need(path, "feature dump"))
    _check_hash(store.meta.get("stage_hash"), cfg.stage_hash("featurize"), path, force)
    if (store.spec.W, store.spec.L) != (cfg["window.W"], cfg["window.L"]):
        raise InvariantViolation(f"{path}: window {store.spec} differs from config")
    return store


def cmd_train(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    store = _load_checked_features(paths["features_train"], cfg, args.force)
    tc = cfg.train_cfg(args.seed)
    model = cfg.model()
    h = cfg.stage_hash("train")
    every = int(cfg["train.checkpoint_every"])
    spec = cfg.window()
    extra = {"stage_hash": h, "seed": args.seed}

    def checkpoint(state, path):
        save_checkpoint(path, state.params, spec.W, spec.L, tied=model.tied,
                        extra={**extra, "epochs": state.epoch, "loss_history": state.loss_history})

    def on_epoch(state):
        if every > 0 and state.epoch % every == 0:
            checkpoint(state, paths["checkpoint"].with_name(f"model_epoch{state.epoch:03d}.json"))

    state = train(store, tc, model, on_epoch=on_epoch)
    checkpoint(state, paths["checkpoint"])
    write_training_log(state, paths["training_log"])
    plots.plot_loss(state.loss_history, paths["training_log"].with_suffix(".png"), target=tc.target_loss)
    log.info("trained %d epochs, final loss %.5f", state.epoch, state.loss_history[-1])
    return 0


def cmd_embed(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    ck = _need(paths["checkpoint"], "checkpoint")
    towers, doc = load_checkpoint(ck, expect={"H": cfg["model.H"], "A": cfg["model.A"], "D": cfg["model.D"],
                                              "W": cfg["window.W"], "L": cfg["window.L"]})
    _check_hash(doc.get("stage_hash"), cfg.stage_hash("train"), ck, args.force)
    store = _load_checked_features(paths[f"features_{args.split}"], cfg, args.force)
    vecs = np.zeros((len(store), int(cfg["model.D"])))
    for role in ("ingress", "egress"):
        rows = np.array([i for i, r in enumerate(store.roles) if r == role], dtype=np.int64)
        if len(rows):
            vecs[rows] = embed_many(towers.get(role, towers.get("ingress")), store.values[rows],
                                    store.valid_len[rows])
    es = EmbeddingSet(store.flow_ids, store.roles, store.sessions, vecs,
                      {"stage_hash": cfg.stage_hash("embed"), "split": args.split})
    out = Path(args.output) if args.output else paths["embeddings"]
    save_embeddings(es, out)
    log.info("embedded %d flows to %s", len(es.flow_ids), out)
    return 0


def _load_checked_embeddings(path: Path, cfg: RunConfig, force: bool) -> EmbeddingSet:
    es = load_embeddings(_need(path, "embeddings"))
    _check_hash(es.meta.get("stage_hash"), cfg.stage_hash("embed"), path, force)
    return es


def _full_scenario(es: EmbeddingSet) -> Scenario:
    """Every ingress against every egress embedding in the file."""
    ing = es.role_rows("ingress")
    egr = es.role_rows("egress")
    by_sess_out = {es.sessions[i]: es.flow_ids[i] for i in egr}
    pairs = {(es.flow_ids[i], by_sess_out[es.sessions[i]]) for i in ing if es.sessions[i] in by_sess_out}
    n = max(1, min(len(ing), len(egr)))
    return Scenario([es.flow_ids[i] for i in ing], es.vectors[ing], [es.flow_ids[i] for i in egr],
                    es.vectors[egr], pairs, len(pairs) / n, 0, len(pairs) / n)


def cmd_index(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    es = _load_checked_embeddings(paths["embeddings"], cfg, args.force)
    egr = es.role_rows("egress")
    if not len(egr):
        raise InvariantViolation("embedding file holds no egress flows to index")
    idx = build_index([es.flow_ids[i] for i in egr], es.vectors[egr], K=cfg.index_k(), seed=args.seed,
                      n_probe=int(cfg["index.n_probe"]),
                      meta={"stage_hash": cfg.stage_hash("index"), "seed": args.seed})
    save_index(idx, paths["index"])
    log.info("indexed %d egress embeddings in %d lists", len(idx), idx.K)
    return 0


def _top_k(cfg: RunConfig):
    v = str(cfg["scenario.top_k"]).lower()
    return None if v in ("none", "", "0") else int(v)


def cmd_match(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    ipath = _need(paths["index"], "index (run `rector index` first)")
    es = _load_checked_embeddings(paths["embeddings"], cfg, args.force)
    idx = load_index(ipath)
    _check_hash((idx.meta or {}).get("stage_hash"), cfg.stage_hash("index"), ipath, args.force)
    sc = _full_scenario(es)
    if sorted(idx.flow_ids) != sorted(sc.egress_ids):
        raise InvariantViolation(f"{ipath} does not index the egress flows of {paths['embeddings']}")
    tau = float(cfg["scenario.tau"])
    t0 = time.perf_counter()
    res = match_ann(sc, idx, min(int(cfg["index.n_probe"]), idx.K), tau, _top_k(cfg), workers=worker_count())
    wall = time.perf_counter() - t0
    out = paths["match"]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "decisions.csv", "w", encoding="utf-8") as fh:
        fh.write("ingress_id,egress_id,score,declared\n")
        for d in res.decisions(sc):
            fh.write(f"{d.ingress_id},{d.egress_id},{d.score!r},{int(d.declared)}\n")
    labels = res.labels(sc)
    dec = res.declared
    _write_json(out / "summary.json", {
        "tau": tau, "comparisons": res.comparisons, "N": sc.N, "M": sc.M, "true_pairs": len(sc.true_pairs),
        "declared": int(dec.sum()), "declared_true": int((dec & labels).sum()),
        "stage_hash": cfg.stage_hash("eval")})
    _write_json(out / "summary.timings.json", {"match_wall_s": wall})
    log.info("matched %d ingress flows: %d comparisons, %d declared", sc.N, res.comparisons, int(dec.sum()))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    es = _load_checked_embeddings(paths["embeddings"], cfg, args.force)
    N, M = int(cfg["scenario.N"]), int(cfg["scenario.M"])
    tau = float(cfg["scenario.tau"])
    matchers = ["pairwise", "ann"] if cfg["scenario.matcher"] == "both" else [str(cfg["scenario.matcher"])]
    if any(m not in ("pairwise", "ann") for m in matchers):
        raise ConfigError(f"scenario.matcher must be pairwise, ann or both, got {cfg['scenario.matcher']!r}")
    out = paths["reports"]
    out.mkdir(parents=True, exist_ok=True)
    curves = {}
    for sigma in cfg.sigmas():
        t0 = time.perf_counter()
        sc = build_scenario(None, es, N, M, sigma, args.seed)
        t_build = time.perf_counter() - t0
        for m in matchers:
            timings = {"scenario_s": t_build}
            t0 = time.perf_counter()
            if m == "pairwise":
                res = match_pairwise(sc, tau)
            else:
                idx = scenario_index(sc, K=cfg.index_k(), n_probe=int(cfg["index.n_probe"]), seed=args.seed)
                timings["index_s"] = time.perf_counter() - t0
                t0 = time.perf_counter()
                res = match_ann(sc, idx, min(int(cfg["index.n_probe"]), idx.K), tau, _top_k(cfg),
                                workers=worker_count())
            timings["match_s"] = time.perf_counter() - t0
            conf = {"N": N, "M": M, "sigma": sigma, "tau": tau, "seed": args.seed, "matcher": m,
                    "K": cfg["index.K"], "n_probe": cfg["index.n_probe"],
                    "stage_hash": cfg.stage_hash("eval")}
            rep = evaluate(sc, res, conf, timings)
            save_report(rep, out / f"eval_{m}_sigma{sigma:g}.json")
            curves[f"{m} σ={sigma:g}"] = rep.roc
            log.info("sigma %.2f %s: TPR@20%%FPR %.3f (%d comparisons)", sigma, m, rep.tpr_at["0.2"],
                     rep.comparisons)
    plots.plot_roc(curves, out / "roc.png")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    counts = [int(c) for c in str(cfg["bench.counts"]).split(",") if c.strip()]
    res = scaling_bench(counts, sigma=float(cfg["bench.sigma"]), repetitions=int(cfg["bench.repetitions"]),
                        seed=args.seed, n_probe=int(cfg["bench.n_probe"]), K=cfg.index_k("bench.K"))
    out = paths["bench"]
    out.mkdir(parents=True, exist_ok=True)
    save_scaling(res, out / "scaling.csv")
    plots.plot_scaling(res.rows, res.slopes, out / "scaling.png")
    log.info("comparison slopes: %s", ", ".join(f"{k} {v:.3f}" for k, v in res.slopes.items()))
    return 0


COMMANDS = {
    "gen": cmd_gen, "split": cmd_split, "featurize": cmd_featurize, "train": cmd_train, "embed": cmd_embed,
    "index": cmd_index, "match": cmd_match, "eval": cmd_eval, "bench": cmd_bench,
}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rector", description="Flow correlation pipeline on synthetic traffic.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="seed for this stage (default: config `seed`)")
        sp.add_argument("--force", action="store_true", help="accept artifacts with a mismatched config hash")
        sp.add_argument("--workdir", help="artifact directory (config paths.workdir)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = add("gen", "generate the synthetic corpus")
    g.add_argument("--circuits", type=int)
    g.add_argument("--websites", type=int)
    g.add_argument("--visits", type=int)
    g.add_argument("--output")
    s = add("split", "circuit-disjoint train/test split")
    s.add_argument("--input")
    s.add_argument("--train-fraction", type=float)
    f = add("featurize", "window features for the split datasets")
    f.add_argument("--split", choices=["train", "test", "both"], default="both")
    t = add("train", "train the two encoder towers")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--target-loss", type=float)
    t.add_argument("--checkpoint-every", type=int)
    e = add("embed", "embed a feature dump with the trained towers")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--output")
    add("index", "build the IVF index over egress embeddings")
    add("match", "match every ingress embedding against the index")
    v = add("eval", "sigma sweep with ROC reports")
    v.add_argument("--sigma", type=float, action="append")
    v.add_argument("-N", type=int)
    v.add_argument("-M", type=int)
    v.add_argument("--matcher", choices=["pairwise", "ann", "both"])
    b = add("bench", "comparison-count scaling benchmark")
    b.add_argument("--counts")
    b.add_argument("--repetitions", type=int)
    return p


def _overrides(args) -> dict[str, object]:
    o: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, raw = (x.strip() for x in item.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        o[k] = _coerce(k, raw)
    flag_keys = {
        "workdir": "paths.workdir", "circuits": "gen.circuits", "websites": "gen.websites", "visits": "gen.visits",
        "train_fraction": "split.train_fraction", "max_epochs": "train.max_epochs",
        "target_loss": "train.target_loss", "checkpoint_every": "train.checkpoint_every",
        "N": "scenario.N", "M": "scenario.M", "matcher": "scenario.matcher", "counts": "bench.counts",
        "repetitions": "bench.repetitions",
    }
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None:
            o[key] = val
    if getattr(args, "sigma", None):
        o["scenario.sigmas"] = ",".join(repr(s) for s in args.sigma)
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        if args.seed is None:
            args.seed = int(cfg["seed"])
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"rector {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"rector {args.command}: error: missing input: {exc.filename or exc}", file=sys.stderr)
        return 2
    except INVARIANT_ERRORS as exc:
        print(f"rector {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        log.debug("internal fault", exc_info=True)
        print(f"rector {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
