import numpy as np
import pytest

from phishguard import _kernels
from phishguard.errors import (CorruptFile, DimensionMismatch, DuplicateId,
                               FormatVersionMismatch, NotNormalized,
                               ZeroVector)
from phishguard.index import VectorIndex


def unit_rows(rng, n, dim):
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def brute_force_search(ids, rows32, query, k, exclude=frozenset()):
    """Full-scan sort oracle: float64 dots, descending score, ties by
    insertion order, exclusions filtered."""
    scores = [float(np.dot(row.astype(np.float64), query)) for row in rows32]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], i))
    picked = [(ids[i], scores[i]) for i in order if ids[i] not in exclude]
    return picked[:k]


def build_index(rng, n, dim=16):
    rows = unit_rows(rng, n, dim)
    idx = VectorIndex(dim)
    ids = [f"e{i}" for i in range(n)]
    rows32 = []
    for email_id, row in zip(ids, rows):
        idx.add(email_id, row)
        rows32.append(np.asarray(row, dtype=np.float32))
    return idx, ids, rows32


# --- add -----------------------------------------------------------------------

def test_add_to_empty():
    idx = VectorIndex(4)
    v = np.array([1.0, 0, 0, 0])
    idx.add("a", v)
    assert len(idx) == 1
    assert "a" in idx


def test_add_duplicate_id():
    idx = VectorIndex(4)
    v = np.array([1.0, 0, 0, 0])
    idx.add("a", v)
    with pytest.raises(DuplicateId):
        idx.add("a", v)


def test_add_not_normalized():
    idx = VectorIndex(4)
    with pytest.raises(NotNormalized):
        idx.add("a", np.array([2.0, 0, 0, 0]))


def test_add_wrong_dim():
    idx = VectorIndex(4)
    with pytest.raises(DimensionMismatch):
        idx.add("a", np.array([1.0, 0, 0]))


def test_add_after_freeze():
    idx = VectorIndex(4)
    idx.add("a", np.array([1.0, 0, 0, 0]))
    idx.freeze()
    with pytest.raises(RuntimeError):
        idx.add("b", np.array([0, 1.0, 0, 0]))


# --- search ---------------------------------------------------------------------

def test_search_clamps_to_index_size():
    rng = np.random.default_rng(0)
    idx, _, _ = build_index(rng, 3)
    query = np.asarray(idx._rows[0], dtype=np.float64)
    hits = idx.search(query, k=5)
    assert len(hits) == 3
    assert [h.rank for h in hits] == [1, 2, 3]


def test_search_excludes_and_compensates():
    rng = np.random.default_rng(1)
    idx, ids, rows32 = build_index(rng, 10)
    query = rows32[4].astype(np.float64)
    plain = idx.search(query, k=5)
    assert plain[0].email_id == "e4"
    excluded = idx.search(query, k=5, exclude={"e4"})
    assert all(h.email_id != "e4" for h in excluded)
    assert len(excluded) == 5  # next-best fills in
    assert [h.email_id for h in excluded] == \
        [i for i, _ in brute_force_search(ids, rows32, query, 5, {"e4"})]


def test_search_zero_query_rejected():
    rng = np.random.default_rng(2)
    idx, _, _ = build_index(rng, 3)
    with pytest.raises(ZeroVector):
        idx.search(np.zeros(16), k=1)


def test_search_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    idx, ids, rows32 = build_index(rng, 50, dim=24)
    for _ in range(20):
        query = unit_rows(rng, 1, 24)[0]
        hits = idx.search(query, k=5)
        oracle = brute_force_search(ids, rows32, query, 5)
        assert [h.email_id for h in hits] == [i for i, _ in oracle]
        assert np.allclose([h.score for h in hits],
                           [s for _, s in oracle], atol=1e-10)


def test_search_scores_non_increasing():
    rng = np.random.default_rng(4)
    idx, _, _ = build_index(rng, 30)
    query = unit_rows(rng, 1, 16)[0]
    hits = idx.search(query, k=10)
    scores = [h.score for h in hits]
    assert scores == sorted(scores, reverse=True)


def test_search_deterministic():
    rng = np.random.default_rng(5)
    idx, _, _ = build_index(rng, 40)
    query = unit_rows(rng, 1, 16)[0]
    first = idx.search(query, k=7)
    second = idx.search(query, k=7)
    assert first == second


def test_tie_break_by_insertion_order():
    idx = VectorIndex(4)
    v = np.array([1.0, 0, 0, 0])
    idx.add("first", v)
    idx.add("second", v)  # identical vector: guaranteed score tie
    hits = idx.search(v.astype(np.float64), k=2)
    assert [h.email_id for h in hits] == ["first", "second"]


# --- kernel backends -------------------------------------------------------------

def test_numpy_and_numba_paths_agree():
    rng = np.random.default_rng(6)
    matrix = unit_rows(rng, 200, 32).astype(np.float32)
    query = unit_rows(rng, 1, 32)[0]
    excluded = np.zeros(200, dtype=np.bool_)
    excluded[rng.integers(0, 200, size=10)] = True
    np_idx, np_scores = _kernels.topk_dot_numpy(matrix, query, 9, excluded)
    if _kernels.HAVE_NUMBA:
        nb_idx, nb_scores = _kernels.topk_dot_numba(matrix, query, 9, excluded)
        assert np.array_equal(np_idx, nb_idx)
        assert np.allclose(np_scores, nb_scores, atol=1e-12)


def test_env_flag_selects_numpy(monkeypatch):
    assert _kernels._env_disables_numba({"PHISHGUARD_NO_NUMBA": "1"})
    assert _kernels._env_disables_numba({"PHISHGUARD_NO_NUMBA": "true"})
    assert not _kernels._env_disables_numba({})
    assert not _kernels._env_disables_numba({"PHISHGUARD_NO_NUMBA": "0"})


# --- persistence -------------------------------------------------------------------

def test_round_trip_preserves_search(tmp_path):
    rng = np.random.default_rng(7)
    idx, ids, rows32 = build_index(rng, 10)
    path = tmp_path / "user.pgix"
    idx.save(path)
    loaded = VectorIndex.load(path)
    assert len(loaded) == 10
    assert loaded.ids() == ids
    for _ in range(20):
        query = unit_rows(rng, 1, 16)[0]
        assert loaded.search(query, k=5) == idx.search(query, k=5)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    idx, _, _ = build_index(rng, 5)
    p1, p2 = tmp_path / "a.pgix", tmp_path / "b.pgix"
    idx.save(p1)
    VectorIndex.load(p1).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_truncated_file(tmp_path):
    rng = np.random.default_rng(9)
    idx, _, _ = build_index(rng, 4)
    path = tmp_path / "user.pgix"
    idx.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CorruptFile):
        VectorIndex.load(path)


def test_load_corrupted_payload(tmp_path):
    rng = np.random.default_rng(10)
    idx, _, _ = build_index(rng, 4)
    path = tmp_path / "user.pgix"
    idx.save(path)
    blob = bytearray(path.read_bytes())
    blob[30] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFile):
        VectorIndex.load(path)


def test_load_dim_mismatch(tmp_path):
    rng = np.random.default_rng(11)
    idx, _, _ = build_index(rng, 4)  # dim 16
    path = tmp_path / "user.pgix"
    idx.save(path)
    with pytest.raises(FormatVersionMismatch):
        VectorIndex.load(path, expected_dim=512)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "user.pgix"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(FormatVersionMismatch):
        VectorIndex.load(path)


def test_empty_index_round_trip(tmp_path):
    idx = VectorIndex(8)
    path = tmp_path / "empty.pgix"
    idx.save(path)
    assert len(VectorIndex.load(path, expected_dim=8)) == 0
