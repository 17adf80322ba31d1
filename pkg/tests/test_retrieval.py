import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratd.data import RawSeries, make_windows
from ratd.encoder import EncoderModel, build_backbone
from ratd.errors import FingerprintMismatch, MissingArtifactError
from ratd.retrieval import (DTWRetriever, EmbeddingIndex, PearsonRetriever, RandomRetriever, build_database,
                            build_index, load_cache, load_index, precompute_training_refs, query_top_k,
                            save_cache, save_index, top_k)


def brute_top_k(emb, ids, q, k, exclude=()):
    """Full sort of (distance, id) pairs."""
    rows = []
    for e, i in zip(emb, ids):
        if i in exclude:
            continue
        rows.append((float(np.sum((e.astype(np.float64) - q) ** 2)), int(i)))
    rows.sort()
    return [i for _, i in rows[:k]], [d for d, _ in rows[:k]]


def _index(N, e=64, seed=0, ties=False, h=2, d=1):
    rng = np.random.default_rng(seed)
    if ties:
        emb = rng.integers(0, 3, size=(N, e)).astype(np.float32)
    else:
        emb = rng.normal(size=(N, e)).astype(np.float32)
    ids = rng.permutation(N * 3)[:N].astype(np.int64)
    cont = rng.normal(size=(N, h, d)).astype(np.float32)
    return EmbeddingIndex(ids, emb, cont, "enc", 4)


def _windows(n_series=3, length=30, l=6, h=3, labels=None):
    out = []
    for s in range(n_series):
        rng = np.random.default_rng(s)
        lab = None if labels is None else labels[s]
        out.extend(make_windows(RawSeries(rng.normal(size=(length, 2)), np.arange(float(length)), ["a", "b"], lab),
                                l, h, series_id=s))
    return out


def _encoder(l=6, d=2):
    import torch
    torch.manual_seed(0)
    hp = {"hidden": 8, "levels": 2, "kernel_size": 3}
    return EncoderModel(build_backbone("tcn", l, d, 8, **hp), l, d, 8, "tcn", hp).freeze()


@pytest.mark.parametrize("k", [1, 3, 10])
def test_top_k_matches_brute_force(k):
    rng = np.random.default_rng(k)
    for trial in range(40):
        N = int(rng.integers(k, 300))
        idx = _index(N, seed=trial, ties=trial % 2 == 0)
        q = idx.embeddings[rng.integers(N)] if trial % 3 == 0 else rng.normal(size=64)
        rs = query_top_k(idx, q, k)
        want_ids, want_d = brute_top_k(idx.embeddings, idx.ids, q, k)
        assert rs.source_ids.tolist() == want_ids
        np.testing.assert_allclose(rs.distances, want_d, rtol=1e-6)
        assert np.all(np.diff(rs.distances) >= 0)


def test_ties_resolved_by_smaller_id():
    d = np.array([1.0, 0.5, 0.5, 0.5, 2.0])
    ids = np.array([10, 7, 3, 5, 1])
    pos, dist = top_k(d, ids, 2)
    assert ids[pos].tolist() == [3, 5]
    pos, _ = top_k(d, ids, 4)
    assert ids[pos].tolist() == [3, 5, 7, 10]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.integers(1, 5), st.data())
def test_top_k_property(dists, k, data):
    n = len(dists)
    k = min(k, n)
    ids = np.array(data.draw(st.permutations(list(range(100, 100 + n)))))
    excl = data.draw(st.sets(st.sampled_from(ids.tolist()), max_size=max(0, n - k)))
    pos, _ = top_k(np.array(dists, float), ids, k, excl)
    brute = sorted((dd, i) for dd, i in zip(dists, ids.tolist()) if i not in excl)[:k]
    assert ids[pos].tolist() == [i for _, i in brute]


def test_top_k_errors():
    with pytest.raises(ValueError):
        top_k(np.zeros(3), np.arange(3), 4)
    with pytest.raises(ValueError):
        top_k(np.zeros(3), np.arange(3), 0)
    with pytest.raises(ValueError):
        top_k(np.zeros(3), np.arange(3), 3, exclude_ids=(1,))


def test_balanced_database_counts():
    labels = np.array([0] * 500 + [1] * 50 + [2] * 5)
    wins = list(range(len(labels)))
    db = build_database(wins, "category_balanced", 256, labels, seed=0)
    counts = np.bincount(labels[db.window_ids])
    assert counts.tolist() == [256, 50, 5]
    again = build_database(wins, "category_balanced", 256, labels, seed=0)
    assert np.array_equal(db.window_ids, again.window_ids)
    with pytest.raises(ValueError, match="zero samples"):
        build_database(wins, "category_balanced", 256, labels, category_set=[0, 1, 2, 9])
    with pytest.raises(ValueError):
        build_database(wins, "category_balanced", 256, np.full(len(wins), -1))


def test_full_train_database():
    ws = _windows()
    db = build_database(ws)
    assert len(db) == len(ws) and db.window_ids.tolist() == list(range(len(ws)))


def test_index_build_and_training_cache_excludes_self():
    ws = _windows()
    enc = _encoder()
    db = build_database(ws)
    idx = build_index(db, enc, "cfg")
    assert idx.embeddings.shape == (len(ws), 8)
    np.testing.assert_allclose(idx.continuations[4], ws[4].target, atol=1e-6)
    cache = precompute_training_refs(idx, ws, 3, encoder=enc)
    assert len(cache) == len(ws)
    for wid, ids in cache.ids.items():
        assert wid not in ids.tolist() and len(ids) == 3
        rs = cache.reference_set(wid, idx)
        np.testing.assert_allclose(rs.references[0], ws[ids[0]].target, atol=1e-6)
    k0 = precompute_training_refs(idx, ws, 0, encoder=enc)
    assert all(len(v) == 0 for v in k0.ids.values())


def test_index_and_cache_persist_bit_exact(tmp_path):
    ws = _windows()
    enc = _encoder()
    idx = build_index(build_database(ws), enc, "c" * 64)
    save_index(idx, tmp_path / "i.idx")
    back = load_index(tmp_path / "i.idx")
    assert back.encoder_fingerprint == enc.fingerprint and back.config_fingerprint == "c" * 64
    assert np.array_equal(back.ids, idx.ids) and np.array_equal(back.embeddings, idx.embeddings)
    assert np.array_equal(back.continuations, idx.continuations) and back.prefix_length == 6
    cache = precompute_training_refs(idx, ws, 2, encoder=enc, config_fingerprint="x")
    save_cache(cache, tmp_path / "r.ref")
    assert load_cache(tmp_path / "r.ref") == cache
    save_cache(cache, tmp_path / "r2.ref")
    assert (tmp_path / "r.ref").read_bytes() == (tmp_path / "r2.ref").read_bytes()


def test_fingerprint_mismatch_and_missing(tmp_path):
    ws = _windows()
    enc = _encoder()
    idx = build_index(build_database(ws), enc)
    other = _encoder()
    import torch
    with torch.no_grad():
        next(other.net.parameters()).add_(1.0)
    with pytest.raises(FingerprintMismatch):
        precompute_training_refs(idx, ws, 2, encoder=other)
    cache = precompute_training_refs(idx, ws, 2, encoder=enc)
    cache.check(enc.fingerprint)
    with pytest.raises(FingerprintMismatch):
        cache.check(other.fingerprint)
    with pytest.raises(MissingArtifactError):
        load_index(tmp_path / "missing.idx")
    with pytest.raises(MissingArtifactError):
        load_cache(tmp_path / "missing.ref")


def test_baseline_retrievers():
    ws = _windows(2, 20)
    db = build_database(ws)
    hist = np.stack([w.history for w in ws])
    for r in (DTWRetriever(db, 6), PearsonRetriever(db, 6)):
        sets = r.query_many(hist[:3], 2)
        # an exact copy of a stored prefix is its own nearest neighbour
        assert [s.source_ids[0] for s in sets] == [0, 1, 2]
        sets = r.query_many(hist[:3], 2, exclude=[(0,), (1,), (2,)])
        assert all(s.source_ids[0] != i for i, s in enumerate(sets))
    a = RandomRetriever(db, 6, seed=1).query_many(hist[:4], 3)
    b = RandomRetriever(db, 6, seed=1).query_many(hist[:4], 3)
    assert all(np.array_equal(x.source_ids, y.source_ids) for x, y in zip(a, b))


def test_cache_lookup_equals_fresh_query():
    ws = _windows()
    enc = _encoder()
    idx = build_index(build_database(ws), enc)
    cache = precompute_training_refs(idx, ws, 3, encoder=enc)
    emb = enc.encode_batch(np.stack([w.history for w in ws]))
    for wid in range(0, len(ws), 7):
        fresh = query_top_k(idx, emb[wid], 3, exclude_ids=(wid,))
        assert np.array_equal(cache.ids[wid], fresh.source_ids)
        assert np.array_equal(cache.distances[wid], fresh.distances)
