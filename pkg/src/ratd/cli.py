"""Command-line entry point.

Every stage reads the experiment config, recomputes the fingerprints of the
sections it depends on and refuses to continue when an upstream artifact was
built from a different configuration. Artifacts live under ``--artifacts``,
``$RATD_ARTIFACTS`` or ``./artifacts``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import synthetic
from .ablation import SUITES, plot_forecast_fan, run_ablation
from .config import ExperimentConfig, load_config
from .diffusion import fit, load_model, sample, save_model
from .encoder import load_encoder, save_encoder
from .errors import ConfigError, FingerprintMismatch, MissingArtifactError, RATDError
from .metrics import evaluate_ensembles
from .pipeline import (Prepared, build_model, cache_arrays, conditioned_from_windows, database_for, load_series,
                       prepare, reference_arrays, train_encoder)
from .retrieval import (DTWRetriever, EncoderRetriever, PearsonRetriever, RandomRetriever,
                        ReferenceDatabase, build_index, load_cache, load_index, precompute_training_refs,
                        save_cache, save_index)
from .serialization import read_container, write_container

log = logging.getLogger("ratd")

ENV_ROOT = "RATD_ARTIFACTS"
DB_MAGIC = b"RATD-DBS1"
FCS_MAGIC = b"RATD-FCS1"

FILES = {
    "encoder": "encoder.bin",
    "database": "database.bin",
    "index": "index.idx",
    "cache": "train_refs.ref",
    "model": "model.bin",
    "train_log": "train_log.jsonl",
    "forecast": "forecast.bin",
    "report": "report.json",
    "report_csv": "report.csv",
}

# config sections each artifact depends on
STAGE_SECTIONS = {
    "encoder": ("dataset", "encoder"),
    "database": ("dataset", "database"),
    "index": ("dataset", "encoder", "database"),
    "cache": ("dataset", "encoder", "database"),
    "model": ("dataset", "encoder", "database", "diffusion", "network", "training"),
    "forecast": ("dataset", "encoder", "database", "diffusion", "network", "training", "eval"),
}


def stage_fingerprint(cfg: ExperimentConfig, stage: str) -> str:
    blob = f"{cfg.fingerprint(*STAGE_SECTIONS[stage])}:{cfg.seed}"
    return hashlib.sha256(blob.encode()).hexdigest()


class Context:
    def __init__(self, cfg: ExperimentConfig, root: Path):
        self.cfg = cfg
        self.root = root
        self._prep = None

    def path(self, name: str) -> Path:
        return self.root / FILES[name]

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing artifact {p.name} ({p}); run the stage that produces it first")
        return p

    @property
    def prep(self) -> Prepared:
        if self._prep is None:
            self._prep = prepare(self.cfg, load_series(self.cfg))
        return self._prep

    @property
    def k(self) -> int:
        db = self.cfg.database
        return 0 if db.mechanism == "none" else db.k

    def check(self, stage: str, found: str, path: Path) -> None:
        want = stage_fingerprint(self.cfg, stage)
        if found != want:
            raise FingerprintMismatch(
                f"{path.name} was built from a different configuration "
                f"(artifact {found[:12]}, config {want[:12]}); rebuild it")

    # -- loaders --------------------------------------------------------------

    def encoder(self):
        p = self.require("encoder")
        model, meta = load_encoder(p)
        self.check("encoder", meta.get("config_fingerprint", ""), p)
        return model

    def database(self) -> ReferenceDatabase:
        p = self.require("database")
        meta, arrays = read_container(p, DB_MAGIC)
        self.check("database", meta["config_fingerprint"], p)
        ids = arrays["window_ids"].astype(np.int64)
        train = self.prep.train
        return ReferenceDatabase([train[i] for i in ids], ids, meta["strategy"], meta.get("n_db"),
                                 meta.get("category_set"))

    def retriever(self):
        mech = self.cfg.database.mechanism
        if self.k == 0:
            return None
        db = self.database()
        l = self.cfg.dataset.l
        if mech == "encoder":
            enc = self.encoder()
            p = self.require("index")
            index = load_index(p)
            if index.encoder_fingerprint != enc.fingerprint:
                raise FingerprintMismatch(f"{p.name} was built with a different encoder; rebuild it")
            self.check("index", index.config_fingerprint, p)
            return EncoderRetriever(index, enc)
        if mech == "random":
            return RandomRetriever(db, l, seed=self.cfg.seed)
        if mech == "dtw":
            return DTWRetriever(db, l)
        return PearsonRetriever(db, l)


# -- commands -------------------------------------------------------------------

def cmd_synth_data(ctx: Context, args) -> None:
    ds = ctx.cfg.dataset
    series = synthetic.generate(ds.synth_series, ds.synth_length, ds.synth_rare_fraction, seed=ds.synth_seed)
    out = Path(args.out) if args.out else ctx.root / "data" / "synthetic.csv"
    synthetic.write_csv(series, out)
    rare = sum(s.category_label == synthetic.rare_label() for s in series)
    print(f"wrote {out} ({len(series)} series, {rare} rare-pattern)")


def cmd_train_encoder(ctx: Context, args) -> None:
    model, hist = train_encoder(ctx.cfg, ctx.prep)
    save_encoder(model, ctx.path("encoder"),
                 {"config_fingerprint": stage_fingerprint(ctx.cfg, "encoder"), "history": hist})
    print(f"encoder {model.architecture_tag}: heldout loss {hist['heldout'][0]:.4f} -> {hist['heldout'][-1]:.4f}")


def cmd_build_db(ctx: Context, args) -> None:
    db = database_for(ctx.cfg, ctx.prep)
    meta = {"strategy": db.strategy, "n_db": db.per_category_count, "category_set": db.category_set,
            "config_fingerprint": stage_fingerprint(ctx.cfg, "database")}
    write_container(ctx.path("database"), DB_MAGIC, meta, {"window_ids": np.asarray(db.window_ids, np.int64)})
    print(f"database: {len(db)} windows ({db.strategy})")


def cmd_index(ctx: Context, args) -> None:
    if ctx.cfg.database.mechanism != "encoder":
        print(f"mechanism {ctx.cfg.database.mechanism!r} searches raw prefixes; no embedding index needed")
        return
    index = build_index(ctx.database(), ctx.encoder(), stage_fingerprint(ctx.cfg, "index"))
    save_index(index, ctx.path("index"))
    print(f"index: {len(index)} entries, e={index.embeddings.shape[1]}")


def cmd_precompute_refs(ctx: Context, args) -> None:
    retriever = ctx.retriever()
    fp = stage_fingerprint(ctx.cfg, "cache")
    if retriever is None:
        cache = precompute_training_refs(_NullRetriever(), ctx.prep.train, 0, config_fingerprint=fp)
    else:
        cache = precompute_training_refs(retriever, ctx.prep.train, ctx.k, config_fingerprint=fp)
    save_cache(cache, ctx.path("cache"))
    print(f"cache: {len(cache)} training windows, k={cache.k}")


class _NullRetriever:
    fingerprint = hashlib.sha256(b"none").hexdigest()


def _load_cache(ctx: Context, retriever):
    p = ctx.require("cache")
    cache = load_cache(p)
    ctx.check("cache", cache.config_fingerprint, p)
    want = retriever.fingerprint if retriever is not None else _NullRetriever.fingerprint
    if cache.encoder_fingerprint != want:
        raise FingerprintMismatch(f"{p.name} was built with a different retriever; rerun precompute-refs")
    return cache


def cmd_train(ctx: Context, args) -> None:
    cfg, prep, k = ctx.cfg, ctx.prep, ctx.k
    retriever = ctx.retriever()
    cache = _load_cache(ctx, retriever)
    train_refs = cache_arrays(cache, retriever.index, len(prep.train)) if k else None
    train_data = conditioned_from_windows(prep.train, train_refs, k)
    val_data = conditioned_from_windows(prep.val, reference_arrays(retriever, prep.val, k), k) if prep.val else None
    model = build_model(cfg, prep.d, k)
    log_path = ctx.path("train_log")
    log_path.unlink(missing_ok=True)
    result = fit(model, train_data, val_data, cfg.training, cfg.diffusion.weighting, seed=cfg.seed,
                 log_path=log_path)
    save_model(model, ctx.path("model"), {"config_fingerprint": stage_fingerprint(cfg, "model"),
                                          "best_epoch": result.best_epoch, "steps": result.steps})
    print(f"trained {result.steps} steps, best epoch {result.best_epoch}")


def _load_model(ctx: Context):
    p = ctx.require("model")
    model, meta = load_model(p)
    ctx.check("model", meta.get("config_fingerprint", ""), p)
    return model


def cmd_forecast(ctx: Context, args) -> None:
    cfg, prep = ctx.cfg, ctx.prep
    model = _load_model(ctx)
    k = ctx.k if args.k is None else args.k
    if k < 0:
        raise ConfigError("--k must be >= 0")
    if cfg.network.fusion == "linear" and k != model.dims["k"]:
        raise ConfigError("linear fusion was trained for a fixed k; --k must match")
    retriever = ctx.retriever() if k > 0 else None
    if k > 0 and retriever is None:
        raise ConfigError("references requested but database.mechanism is 'none'")
    test = prep.test
    refs = reference_arrays(retriever, test, k)
    data = conditioned_from_windows(test, refs, k)
    gen = torch.Generator().manual_seed(cfg.seed)
    samples = sample(model, data.history, data.refs, data.positions, cfg.eval.num_samples, generator=gen)
    fp = stage_fingerprint(cfg, "forecast")
    write_container(ctx.path("forecast") if args.out is None else Path(args.out), FCS_MAGIC,
                    {"config_fingerprint": fp, "k": k},
                    {"samples": samples.astype(np.float32), "truth": data.target, "history": data.history})
    if args.plot:
        plot_forecast_fan(data.history[0], samples[0], data.target[0], args.plot)
    print(f"forecast: {samples.shape[0]} windows x {samples.shape[1]} samples (k={k})")


def cmd_evaluate(ctx: Context, args) -> None:
    p = Path(args.forecast) if args.forecast else ctx.require("forecast")
    if not p.exists():
        raise MissingArtifactError(f"missing artifact {p.name} ({p}); run forecast first")
    meta, arrays = read_container(p, FCS_MAGIC)
    ctx.check("forecast", meta["config_fingerprint"], p)
    cfg = ctx.cfg.replace(**{"database.k": meta["k"]}) if meta["k"] != ctx.cfg.database.k else ctx.cfg
    report = evaluate_ensembles(arrays["samples"], arrays["truth"], cfg.eval.point, cfg.eval.mse_compat,
                                cfg.fingerprint())
    out = {**report.to_dict(), "k": meta["k"], "report_fingerprint": report.fingerprint}
    ctx.path("report").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    ctx.path("report_csv").write_text("metric,value\n" + "".join(
        f"{m},{getattr(report, m)!r}\n" for m in ("mse", "mae", "crps")))
    print(f"MSE {report.mse:.4f}  MAE {report.mae:.4f}  CRPS {report.crps:.4f}")


def cmd_ablate(ctx: Context, args) -> None:
    suites = args.suite or ctx.cfg.eval.suites
    if not suites:
        raise ConfigError(f"no suite given; choose from {sorted(SUITES)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    arms = args.arms.split(",") if args.arms else None
    series = load_series(ctx.cfg)
    for suite in suites:
        table = run_ablation(suite, ctx.cfg, seeds=seeds, arms=arms, series=series,
                             out_dir=ctx.root / "ablation")
        print(table.render())


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-encoder": cmd_train_encoder,
    "build-db": cmd_build_db,
    "index": cmd_index,
    "precompute-refs": cmd_precompute_refs,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set database.k=5 (repeatable)")
    common.add_argument("--artifacts", help=f"artifact root (default ${ENV_ROOT} or ./artifacts)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ratd", description="Retrieval-augmented diffusion forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "synth-data":
            sp.add_argument("--out", help="CSV destination")
        elif name == "forecast":
            sp.add_argument("--k", type=int, default=None, help="number of references (0 disables retrieval)")
            sp.add_argument("--out", default=None)
            sp.add_argument("--plot", default=None, help="write a forecast fan PNG for the first test window")
        elif name == "evaluate":
            sp.add_argument("--forecast", default=None)
        elif name == "ablate":
            sp.add_argument("--suite", action="append", choices=sorted(SUITES))
            sp.add_argument("--seeds", default=None, help="comma-separated seeds")
            sp.add_argument("--arms", default=None, help="comma-separated arm names")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        root = Path(args.artifacts or os.environ.get(ENV_ROOT) or "artifacts")
        root.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](Context(cfg, root), args)
    except RATDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
