"""Hot numeric kernels for the retrieval scan.

The exact top-k dot-product scan is the one numeric inner loop the
engine runs per classification, so it carries a numba @njit kernel with
a pure-numpy fallback. Selection:

  * numba available and PHISHGUARD_NO_NUMBA unset -> JIT kernel
  * PHISHGUARD_NO_NUMBA=1 (or numba missing)      -> numpy path

Both paths implement identical semantics: scores are float64
accumulations over the float32 entry matrix, hits ordered by descending
score with ties broken by ascending row index, excluded rows skipped.
benchmarks/bench_knn.py compares the two.
"""
from __future__ import annotations

import os

import numpy as np


def _env_disables_numba(env=None) -> bool:
    env = os.environ if env is None else env
    return str(env.get("PHISHGUARD_NO_NUMBA", "")).lower() in {"1", "true", "yes"}


def topk_dot_numpy(matrix: np.ndarray, query: np.ndarray, k: int,
                   excluded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized scan: full matvec then a lexicographic partial sort."""
    scores = matrix.astype(np.float64) @ query
    valid = np.nonzero(~excluded)[0]
    if valid.size == 0 or k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    sub = scores[valid]
    # Primary key: descending score; secondary: ascending original index.
    order = np.lexsort((valid, -sub))[:k]
    pick = valid[order].astype(np.int64)
    return pick, scores[pick]


def _topk_dot_scan(matrix, query, k, excluded):  # pragma: no cover - jitted
    n, d = matrix.shape
    scores = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += matrix[i, j] * query[j]
        scores[i] = s
    out_idx = np.empty(k, dtype=np.int64)
    out_scores = np.empty(k, dtype=np.float64)
    taken = excluded.copy()
    m = 0
    for _ in range(k):
        best = -1
        best_score = -np.inf
        for i in range(n):
            # strict '>' keeps the lowest index on score ties
            if not taken[i] and scores[i] > best_score:
                best_score = scores[i]
                best = i
        if best < 0:
            break
        taken[best] = True
        out_idx[m] = best
        out_scores[m] = best_score
        m += 1
    return out_idx[:m], out_scores[:m]


HAVE_NUMBA = False
topk_dot_numba = None
if not _env_disables_numba():
    try:
        import numba

        topk_dot_numba = numba.njit(cache=True)(_topk_dot_scan)
        HAVE_NUMBA = True
    except ImportError:
        pass

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def topk_dot(matrix: np.ndarray, query: np.ndarray, k: int,
             excluded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k by dot product over the active backend.

    matrix: (n, dim) float32, query: (dim,) float64,
    excluded: (n,) bool. Returns (indices, scores), at most k rows.
    """
    if matrix.shape[0] == 0 or k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    if HAVE_NUMBA:
        return topk_dot_numba(matrix, query, k, excluded)
    return topk_dot_numpy(matrix, query, k, excluded)
