"""In-memory orchestration shared by the CLI stages and the ablation harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import synthetic
from .config import ExperimentConfig
from .data import (Normalizer, RawSeries, TimeSeriesWindow, fit_normalizer, make_windows,
                   read_csv_series, split, thin_windows)
from .diffusion import ConditionedData, DiffusionModel, fit, sample
from .encoder import EncoderModel, pretrain_encoder
from .metrics import MetricReport, evaluate_ensembles
from .retrieval import (DTWRetriever, EncoderRetriever, PearsonRetriever, RandomRetriever, RefCache,
                        ReferenceDatabase, build_database, build_index, precompute_training_refs)

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    train: list[TimeSeriesWindow]
    val: list[TimeSeriesWindow]
    test: list[TimeSeriesWindow]
    normalizer: Normalizer
    d: int

    @property
    def train_labels(self) -> np.ndarray:
        return np.array([-1 if w.category_label is None else w.category_label for w in self.train])


def load_series(cfg: ExperimentConfig) -> list[RawSeries]:
    ds = cfg.dataset
    if ds.path is None:
        return synthetic.generate(ds.synth_series, ds.synth_length, ds.synth_rare_fraction, seed=ds.synth_seed)
    return read_csv_series(ds.path, ds)


def prepare(cfg: ExperimentConfig, series: list[RawSeries] | None = None) -> Prepared:
    """Windows -> random 7:1:2 split -> train-only z-score -> thinned test set."""
    ds = cfg.dataset
    series = load_series(cfg) if series is None else series
    windows = []
    for sid, rs in enumerate(series):
        windows.extend(make_windows(rs, ds.l, ds.h, ds.stride, ds.target_features, series_id=sid))
    train, val, test = split(windows, ds.split_ratios, "random", ds.split_seed)
    norm = fit_normalizer(train, fitted_on="train")
    tf = ds.target_features
    apply = lambda ws: [norm.apply(w, tf) for w in ws]
    test = thin_windows(test, ds.eval_stride or ds.h)
    return Prepared(apply(train), apply(val), apply(test), norm, series[0].d)


def relative_positions(windows: list[TimeSeriesWindow]) -> np.ndarray:
    """Timestamps measured from each window's start, in units of its median step."""
    ts = np.stack([w.timestamps for w in windows]).astype(np.float64)
    rel = ts - ts[:, :1]
    step = np.median(np.diff(ts, axis=1), axis=1, keepdims=True)
    step = np.where(step > 0, step, 1.0)
    return (rel / step).astype(np.float32)


def conditioned_from_windows(windows: list[TimeSeriesWindow], refs: np.ndarray | None = None,
                             k: int = 0) -> ConditionedData:
    hist = np.stack([w.history for w in windows]).astype(np.float32)
    tgt = np.stack([w.target for w in windows]).astype(np.float32)
    if refs is None:
        refs = np.zeros((len(windows), k, tgt.shape[1], hist.shape[2]), np.float32)
    return ConditionedData(hist, tgt, relative_positions(windows), np.asarray(refs, dtype=np.float32))


def make_retriever(cfg: ExperimentConfig, prep: Prepared, encoder: EncoderModel | None = None,
                   seed: int | None = None):
    """Database plus retriever for the configured mechanism (None when references are off)."""
    db_cfg = cfg.database
    seed = cfg.seed if seed is None else seed
    if db_cfg.mechanism == "none" or db_cfg.k == 0:
        return None, None
    db = database_for(cfg, prep)
    l = cfg.dataset.l
    if db_cfg.mechanism == "encoder":
        if encoder is None:
            raise ValueError("encoder retrieval needs a pretrained encoder")
        return db, EncoderRetriever(build_index(db, encoder, cfg.fingerprint("dataset", "encoder", "database")), encoder)
    if db_cfg.mechanism == "random":
        return db, RandomRetriever(db, l, seed=seed)
    if db_cfg.mechanism == "dtw":
        return db, DTWRetriever(db, l)
    return db, PearsonRetriever(db, l)


def database_for(cfg: ExperimentConfig, prep: Prepared) -> ReferenceDatabase:
    db_cfg = cfg.database
    if db_cfg.strategy == "category_balanced":
        return build_database(prep.train, "category_balanced", db_cfg.n_db, prep.train_labels, seed=cfg.seed)
    return build_database(prep.train, "full_train")


def train_encoder(cfg: ExperimentConfig, prep: Prepared, seed: int | None = None):
    prefixes = np.stack([w.history for w in prep.train]).astype(np.float32)
    return pretrain_encoder(prefixes, cfg.encoder, seed=cfg.seed if seed is None else seed)


def reference_arrays(retriever, windows, k) -> np.ndarray:
    h = windows[0].target.shape[0]
    d = windows[0].history.shape[1]
    if retriever is None or k == 0:
        return np.zeros((len(windows), 0, h, d), np.float32)
    hist = np.stack([w.history for w in windows]).astype(np.float32)
    sets = retriever.query_many(hist, k)
    return np.stack([rs.references for rs in sets]).astype(np.float32)


def cache_arrays(cache: RefCache, index, n: int) -> np.ndarray:
    return np.stack([cache.reference_set(i, index).references for i in range(n)]).astype(np.float32)


def build_model(cfg: ExperimentConfig, d: int, k: int | None = None) -> DiffusionModel:
    torch.manual_seed(cfg.seed)
    ds = cfg.dataset
    k = cfg.database.k if k is None else k
    return DiffusionModel(cfg.network, cfg.diffusion, d, ds.l, ds.h, k, ds.target_features)


@dataclass
class ExperimentResult:
    report: MetricReport
    samples: np.ndarray  # [N, m, h, d']
    truth: np.ndarray
    train_history: list
    model: DiffusionModel
    test_refs: np.ndarray


def run_experiment(cfg: ExperimentConfig, series: list[RawSeries] | None = None,
                   prep: Prepared | None = None) -> ExperimentResult:
    """Full pipeline in memory: encoder -> database -> cache -> diffusion training -> sampling -> metrics."""
    prep = prepare(cfg, series) if prep is None else prep
    k = cfg.database.k if cfg.database.mechanism != "none" else 0
    encoder = None
    if cfg.database.mechanism == "encoder" and k > 0:
        encoder, _ = train_encoder(cfg, prep)
    _, retriever = make_retriever(cfg.replace(**{"database.k": k}), prep, encoder)

    if retriever is not None:
        cache = precompute_training_refs(retriever, prep.train, k)
        train_refs = cache_arrays(cache, retriever.index, len(prep.train))
    else:
        train_refs = None
    train_data = conditioned_from_windows(prep.train, train_refs, k)
    val_data = conditioned_from_windows(prep.val, reference_arrays(retriever, prep.val, k), k) if prep.val else None
    test_refs = reference_arrays(retriever, prep.test, k)
    test_data = conditioned_from_windows(prep.test, test_refs, k)

    model = build_model(cfg, prep.d, k)
    result = fit(model, train_data, val_data, cfg.training, cfg.diffusion.weighting, seed=cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    samples = sample(model, test_data.history, test_data.refs, test_data.positions,
                     cfg.eval.num_samples, generator=gen)
    report = evaluate_ensembles(samples, test_data.target, cfg.eval.point, cfg.eval.mse_compat,
                                cfg.fingerprint())
    return ExperimentResult(report, samples, test_data.target, result.history, model, test_refs)
