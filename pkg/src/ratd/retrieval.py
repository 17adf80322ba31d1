"""Reference database, embedded index, exact top-k search and the training cache."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TimeSeriesWindow
from .errors import FingerprintMismatch, MissingArtifactError
from .similarity import dtw_to_bank, pearson_to_bank

IDX_MAGIC = b"RATD-IDX1"
REF_MAGIC = b"RATD-REF1"
_FP_LEN = 64  # hex sha256


@dataclass
class ReferenceDatabase:
    windows: list[TimeSeriesWindow]
    window_ids: np.ndarray  # id of each stored window within the training partition
    strategy: str = "full_train"
    per_category_count: int | None = None
    category_set: list[int] | None = None

    def __len__(self):
        return len(self.windows)

    def full(self) -> np.ndarray:
        return np.stack([w.full for w in self.windows]).astype(np.float32)


def build_database(train_windows: list[TimeSeriesWindow], strategy: str = "full_train",
                   n_db: int | None = None, labels=None, seed: int = 0,
                   category_set=None) -> ReferenceDatabase:
    if strategy == "full_train":
        return ReferenceDatabase(list(train_windows), np.arange(len(train_windows)), strategy)
    if strategy != "category_balanced":
        raise ValueError(f"unknown database strategy {strategy!r}")
    if n_db is None or labels is None:
        raise ValueError("category_balanced needs labels and n_db")
    if n_db <= 0:
        raise ValueError("n_db must be positive")
    labels = np.asarray(labels)
    if len(labels) != len(train_windows):
        raise ValueError("one label per training window required")
    if np.any(labels < 0):
        raise ValueError("category_balanced needs every window labeled")
    cats = sorted(set(labels.tolist())) if category_set is None else sorted(category_set)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in cats:
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"category {c} has zero samples")
        take = min(len(members), n_db)
        chosen.append(np.sort(rng.choice(members, size=take, replace=False)))
    ids = np.sort(np.concatenate(chosen))
    return ReferenceDatabase([train_windows[i] for i in ids], ids, strategy, n_db, cats)


@dataclass
class ReferenceSet:
    references: np.ndarray  # [k, h, d]
    source_ids: np.ndarray  # [k]
    distances: np.ndarray  # [k], float32, nondecreasing

    @property
    def k(self) -> int:
        return len(self.source_ids)


def top_k(dist: np.ndarray, ids: np.ndarray, k: int, exclude_ids=()) -> tuple[np.ndarray, np.ndarray]:
    """Exact k smallest distances, ties broken by smaller id. Returns (positions, distances)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    eligible = np.ones(len(ids), dtype=bool)
    if len(exclude_ids):
        eligible &= ~np.isin(ids, np.fromiter(exclude_ids, dtype=np.int64))
    pos = np.flatnonzero(eligible)
    if k > len(pos):
        raise ValueError(f"k={k} larger than the {len(pos)} eligible entries")
    d = dist[pos]
    if k < len(pos):
        # every entry tied with the k-th distance must survive the partition
        kth = np.partition(d, k - 1)[k - 1]
        keep = d <= kth
        pos, d = pos[keep], d[keep]
    order = np.lexsort((ids[pos], d))[:k]
    return pos[order], d[order]


@dataclass
class EmbeddingIndex:
    ids: np.ndarray  # [N] int64
    embeddings: np.ndarray  # [N, e] float32
    continuations: np.ndarray  # [N, h, d] float32
    encoder_fingerprint: str
    prefix_length: int
    config_fingerprint: str = ""
    _pos: dict = field(default=None, repr=False)

    def __len__(self):
        return len(self.ids)

    @property
    def entries(self):
        return list(zip(self.ids.tolist(), self.embeddings, self.continuations))

    def position(self, window_id: int) -> int:
        if self._pos is None:
            self._pos = {int(i): p for p, i in enumerate(self.ids)}
        return self._pos[int(window_id)]

    def gather(self, source_ids) -> np.ndarray:
        if len(source_ids) == 0:
            return np.zeros((0,) + self.continuations.shape[1:], np.float32)
        return self.continuations[[self.position(i) for i in source_ids]]


def build_index(db: ReferenceDatabase, encoder, config_fingerprint: str = "") -> EmbeddingIndex:
    if not encoder.frozen:
        raise ValueError("index requires a frozen encoder")
    full = db.full()
    n = encoder.input_length
    h = full.shape[1] - n
    if h <= 0 or full.shape[2] != encoder.input_features:
        raise ValueError(f"window shape {full.shape[1:]} incompatible with encoder (n={n}, d={encoder.input_features})")
    emb = encoder.encode_batch(full[:, :n])
    return EmbeddingIndex(np.asarray(db.window_ids, dtype=np.int64), emb.astype(np.float32),
                          np.ascontiguousarray(full[:, n:n + h]), encoder.fingerprint, n, config_fingerprint)


def squared_distances(index: EmbeddingIndex, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    return ((index.embeddings.astype(np.float64) - q) ** 2).sum(axis=1)


def query_top_k(index: EmbeddingIndex, query_embedding, k: int, exclude_ids=()) -> ReferenceSet:
    pos, d = top_k(squared_distances(index, query_embedding), index.ids, k, exclude_ids)
    return ReferenceSet(index.continuations[pos], index.ids[pos].copy(), d.astype(np.float32))


# -- retrievers: one interface over the ablation's retrieval mechanisms -------

class EncoderRetriever:
    name = "encoder"

    def __init__(self, index: EmbeddingIndex, encoder):
        self.index = index
        self.encoder = encoder
        self.fingerprint = index.encoder_fingerprint

    def query_many(self, histories: np.ndarray, k: int, exclude=None) -> list[ReferenceSet]:
        emb = self.encoder.encode_batch(histories[:, -self.index.prefix_length:])
        exclude = exclude or [()] * len(emb)
        return [query_top_k(self.index, e, k, ex) for e, ex in zip(emb, exclude)]


class _BankRetriever:
    """Retrieval over raw prefixes with a pluggable distance."""

    def __init__(self, db: ReferenceDatabase, prefix_length: int):
        full = db.full()
        self.ids = np.asarray(db.window_ids, dtype=np.int64)
        self.prefixes = full[:, :prefix_length].astype(np.float64)
        self.index = EmbeddingIndex(self.ids, np.zeros((len(self.ids), 0), np.float32),
                                    np.ascontiguousarray(full[:, prefix_length:]),
                                    self.fingerprint, prefix_length)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.name.encode()).hexdigest()

    def distances(self, history: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def query_many(self, histories, k, exclude=None):
        exclude = exclude or [()] * len(histories)
        out = []
        for hist, ex in zip(histories, exclude):
            pos, d = top_k(self.distances(hist[-self.prefixes.shape[1]:]), self.ids, k, ex)
            out.append(ReferenceSet(self.index.continuations[pos], self.ids[pos].copy(), d.astype(np.float32)))
        return out


class DTWRetriever(_BankRetriever):
    name = "dtw"

    def distances(self, history):
        return dtw_to_bank(history, self.prefixes)


class PearsonRetriever(_BankRetriever):
    name = "pearson"

    def distances(self, history):
        return 1.0 - pearson_to_bank(history, self.prefixes)


class RandomRetriever(_BankRetriever):
    name = "random"

    def __init__(self, db, prefix_length, seed=0):
        self.seed = seed
        super().__init__(db, prefix_length)
        self.rng = np.random.default_rng(seed)

    @property
    def fingerprint(self):
        return hashlib.sha256(f"random:{self.seed}".encode()).hexdigest()

    def distances(self, history):
        return self.rng.random(len(self.ids))


# -- training cache -------------------------------------------------------------

@dataclass
class RefCache:
    k: int
    ids: dict[int, np.ndarray]
    distances: dict[int, np.ndarray]
    encoder_fingerprint: str
    config_fingerprint: str = ""

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, RefCache):
            return NotImplemented
        return (self.k == other.k and self.encoder_fingerprint == other.encoder_fingerprint
                and self.config_fingerprint == other.config_fingerprint
                and self.ids.keys() == other.ids.keys()
                and all(np.array_equal(self.ids[w], other.ids[w]) for w in self.ids)
                and all(np.array_equal(self.distances[w], other.distances[w]) for w in self.ids))

    def reference_set(self, window_id: int, index: EmbeddingIndex) -> ReferenceSet:
        if window_id not in self.ids:
            raise KeyError(f"window {window_id} missing from reference cache")
        ids = self.ids[window_id]
        return ReferenceSet(index.gather(ids), ids, self.distances[window_id])

    def check(self, fingerprint: str) -> None:
        if fingerprint != self.encoder_fingerprint:
            raise FingerprintMismatch(
                f"reference cache built with {self.encoder_fingerprint[:12]}, encoder is {fingerprint[:12]}")


def precompute_training_refs(retriever, train_windows: list[TimeSeriesWindow], k: int,
                             encoder=None, window_ids=None, config_fingerprint: str = "") -> RefCache:
    """References for each training window, never including the window itself.

    ``retriever`` is any retriever, or an EmbeddingIndex together with ``encoder``.
    """
    if isinstance(retriever, EmbeddingIndex):
        if encoder is None:
            raise ValueError("an EmbeddingIndex needs its encoder")
        if encoder.fingerprint != retriever.encoder_fingerprint:
            raise FingerprintMismatch("index was built with a different encoder")
        retriever = EncoderRetriever(retriever, encoder)
    if window_ids is None:
        window_ids = np.arange(len(train_windows))
    ids, dists = {}, {}
    if k > 0:
        histories = np.stack([w.history for w in train_windows]).astype(np.float32)
        sets = retriever.query_many(histories, k, exclude=[(int(w),) for w in window_ids])
        for w, rs in zip(window_ids, sets):
            ids[int(w)] = rs.source_ids.astype(np.int64)
            dists[int(w)] = rs.distances.astype(np.float32)
    else:
        for w in window_ids:
            ids[int(w)] = np.zeros(0, np.int64)
            dists[int(w)] = np.zeros(0, np.float32)
    return RefCache(k, ids, dists, retriever.fingerprint, config_fingerprint)


# -- persistence ------------------------------------------------------------

def _fp_bytes(fp: str) -> bytes:
    return fp.encode("ascii").ljust(_FP_LEN, b"\0")[:_FP_LEN]


def _fp_str(b: bytes) -> str:
    return b.rstrip(b"\0").decode("ascii")


def save_index(index: EmbeddingIndex, path) -> None:
    count, e = index.embeddings.shape
    _, h, d = index.continuations.shape
    rec = np.dtype([("id", "<i8"), ("emb", "<f4", (e,)), ("cont", "<f4", (h * d,))])
    body = np.empty(count, dtype=rec)
    body["id"] = index.ids
    body["emb"] = index.embeddings
    body["cont"] = index.continuations.reshape(count, h * d)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(IDX_MAGIC)
        fh.write(struct.pack("<IIII", count, e, h, d))
        fh.write(struct.pack("<I", index.prefix_length))
        fh.write(_fp_bytes(index.encoder_fingerprint))
        fh.write(_fp_bytes(index.config_fingerprint))
        fh.write(body.tobytes())


def load_index(path) -> EmbeddingIndex:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    buf = path.read_bytes()
    if buf[:9] != IDX_MAGIC:
        raise FingerprintMismatch(f"{path}: not an index file")
    count, e, h, d = struct.unpack_from("<IIII", buf, 9)
    (n,) = struct.unpack_from("<I", buf, 25)
    off = 29
    enc_fp = _fp_str(buf[off:off + _FP_LEN])
    cfg_fp = _fp_str(buf[off + _FP_LEN:off + 2 * _FP_LEN])
    off += 2 * _FP_LEN
    rec = np.dtype([("id", "<i8"), ("emb", "<f4", (e,)), ("cont", "<f4", (h * d,))])
    body = np.frombuffer(buf, dtype=rec, count=count, offset=off)
    return EmbeddingIndex(body["id"].astype(np.int64), body["emb"].astype(np.float32).reshape(count, e),
                          body["cont"].astype(np.float32).reshape(count, h, d), enc_fp, n, cfg_fp)


def save_cache(cache: RefCache, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(REF_MAGIC)
        fh.write(_fp_bytes(cache.encoder_fingerprint))
        fh.write(_fp_bytes(cache.config_fingerprint))
        fh.write(struct.pack("<II", len(cache.ids), cache.k))
        for w in sorted(cache.ids):
            ids = cache.ids[w]
            fh.write(struct.pack("<qI", w, len(ids)))
            fh.write(np.asarray(ids, dtype="<i8").tobytes())
            fh.write(np.asarray(cache.distances[w], dtype="<f4").tobytes())


def load_cache(path) -> RefCache:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    buf = path.read_bytes()
    if buf[:9] != REF_MAGIC:
        raise FingerprintMismatch(f"{path}: not a reference cache file")
    off = 9
    enc_fp = _fp_str(buf[off:off + _FP_LEN])
    cfg_fp = _fp_str(buf[off + _FP_LEN:off + 2 * _FP_LEN])
    off += 2 * _FP_LEN
    count, k = struct.unpack_from("<II", buf, off)
    off += 8
    ids, dists = {}, {}
    for _ in range(count):
        w, kk = struct.unpack_from("<qI", buf, off)
        off += 12
        ids[w] = np.frombuffer(buf, "<i8", kk, off).astype(np.int64)
        off += 8 * kk
        dists[w] = np.frombuffer(buf, "<f4", kk, off).astype(np.float32)
        off += 4 * kk
    return RefCache(k, ids, dists, enc_fp, cfg_fp)
