"""Numeric inner loops: exact top-k selection, BM25 accumulation, bounded BFS.

Each kernel has a numba implementation and a pure-numpy one with identical
results. The numba path is used when numba imports and ``KAR_DISABLE_NUMBA``
is unset (or set to ``0``/``false``). Both paths stay importable so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def _wrap(fn):
            return fn

        return _wrap


def _env_disabled() -> bool:
    return os.environ.get("KAR_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _env_disabled()

FORWARD = np.uint8(1)
BACKWARD = np.uint8(0)


# ---------------------------------------------------------------------------
# top-k over a score vector; ties go to the lower index
# ---------------------------------------------------------------------------


def top_k_numpy(scores: np.ndarray, k: int) -> np.ndarray:
    n = scores.shape[0]
    k = min(int(k), n)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    idx = np.arange(n, dtype=np.int64)
    if k == n:
        return idx[np.lexsort((idx, -scores))]
    threshold = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > threshold)
    ties = np.flatnonzero(scores == threshold)[: k - above.size]
    chosen = np.concatenate((above, ties))
    return chosen[np.lexsort((chosen, -scores[chosen]))].astype(np.int64)


@njit(cache=False)
def _top_k_numba_impl(scores, k):
    n = scores.shape[0]
    if k > n:
        k = n
    best_s = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    m = 0
    for i in range(n):
        s = scores[i]
        if m < k:
            j = m
            m += 1
        elif s > best_s[k - 1]:
            j = k - 1
        else:
            continue
        while j > 0 and best_s[j - 1] < s:
            best_s[j] = best_s[j - 1]
            best_i[j] = best_i[j - 1]
            j -= 1
        best_s[j] = s
        best_i[j] = i
    return best_i


def top_k_numba(scores: np.ndarray, k: int) -> np.ndarray:
    if k <= 0 or scores.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return _top_k_numba_impl(np.ascontiguousarray(scores, dtype=np.float64), int(k))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, best first, ties by ascending index."""
    if USE_NUMBA:
        return top_k_numba(scores, k)
    return top_k_numpy(np.asarray(scores, dtype=np.float64), k)


# ---------------------------------------------------------------------------
# BM25 score accumulation over CSR postings
# ---------------------------------------------------------------------------


def bm25_scores_numpy(indptr, post_doc, post_tf, doc_len, idf, query_terms, k1, b, avgdl, n_docs):
    scores = np.zeros(n_docs, dtype=np.float64)
    for t in query_terms:
        lo, hi = indptr[t], indptr[t + 1]
        docs = post_doc[lo:hi]
        tf = post_tf[lo:hi]
        num = tf * (k1 + 1.0)
        den = tf + k1 * (1.0 - b + b * doc_len[docs] / avgdl)
        # doc ids are unique within one posting list
        scores[docs] += idf[t] * num / den
    return scores


@njit(cache=False)
def _bm25_scores_numba_impl(indptr, post_doc, post_tf, doc_len, idf, query_terms, k1, b, avgdl, n_docs):
    scores = np.zeros(n_docs, dtype=np.float64)
    for qi in range(query_terms.shape[0]):
        t = query_terms[qi]
        w = idf[t]
        for p in range(indptr[t], indptr[t + 1]):
            d = post_doc[p]
            tf = post_tf[p]
            num = tf * (k1 + 1.0)
            den = tf + k1 * (1.0 - b + b * doc_len[d] / avgdl)
            scores[d] += w * num / den
    return scores


def bm25_scores_numba(indptr, post_doc, post_tf, doc_len, idf, query_terms, k1, b, avgdl, n_docs):
    return _bm25_scores_numba_impl(
        indptr, post_doc, post_tf, doc_len, idf,
        np.ascontiguousarray(query_terms, dtype=np.int64),
        float(k1), float(b), float(avgdl), int(n_docs),
    )


def bm25_scores(indptr, post_doc, post_tf, doc_len, idf, query_terms, k1, b, avgdl, n_docs):
    """Okapi BM25 score of every document; repeated query terms count repeatedly."""
    fn = bm25_scores_numba if USE_NUMBA else bm25_scores_numpy
    return fn(indptr, post_doc, post_tf, doc_len, idf, query_terms, k1, b, avgdl, n_docs)


# ---------------------------------------------------------------------------
# bounded breadth-first search over an undirected CSR view
# ---------------------------------------------------------------------------
#
# Adjacency rows are sorted by (neighbor, relation, direction with forward
# first) and node indices follow lexicographic node_id order, so expanding a
# level in ascending index order yields the lexicographically smallest
# predecessor for every newly reached node.


def bfs_numpy(indptr, nbr, rel, fwd, start, h):
    n = indptr.shape[0] - 1
    dist = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    prel = np.full(n, -1, dtype=np.int64)
    pfwd = np.zeros(n, dtype=np.uint8)
    dist[start] = 0
    frontier = np.array([start], dtype=np.int64)
    for depth in range(1, h + 1):
        starts = indptr[frontier]
        counts = indptr[frontier + 1] - starts
        total = int(counts.sum())
        if total == 0:
            break
        offsets = np.repeat(starts - (np.cumsum(counts) - counts), counts)
        pos = offsets + np.arange(total, dtype=np.int64)
        preds = np.repeat(frontier, counts)
        cand = nbr[pos]
        keep = dist[cand] < 0
        pos, preds, cand = pos[keep], preds[keep], cand[keep]
        if cand.size == 0:
            break
        reached, first = np.unique(cand, return_index=True)
        dist[reached] = depth
        parent[reached] = preds[first]
        prel[reached] = rel[pos[first]]
        pfwd[reached] = fwd[pos[first]]
        frontier = reached
    return dist, parent, prel, pfwd


@njit(cache=False)
def _bfs_numba_impl(indptr, nbr, rel, fwd, start, h):
    n = indptr.shape[0] - 1
    dist = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    prel = np.full(n, -1, dtype=np.int64)
    pfwd = np.zeros(n, dtype=np.uint8)
    queue = np.empty(n, dtype=np.int64)
    dist[start] = 0
    queue[0] = start
    lo, hi = 0, 1
    for depth in range(1, h + 1):
        tail = hi
        for qi in range(lo, hi):
            u = queue[qi]
            for p in range(indptr[u], indptr[u + 1]):
                v = nbr[p]
                if dist[v] < 0:
                    dist[v] = depth
                    parent[v] = u
                    prel[v] = rel[p]
                    pfwd[v] = fwd[p]
                    queue[tail] = v
                    tail += 1
        if tail == hi:
            break
        queue[hi:tail] = np.sort(queue[hi:tail])
        lo, hi = hi, tail
    return dist, parent, prel, pfwd


def bfs_numba(indptr, nbr, rel, fwd, start, h):
    return _bfs_numba_impl(indptr, nbr, rel, fwd, int(start), int(h))


def bfs(indptr, nbr, rel, fwd, start, h):
    """Hop distance and first-found parent edge of every node within ``h`` hops.

    Returns ``(dist, parent, parent_rel, parent_fwd)``; unreached nodes have
    ``dist == -1`` and the start node has ``dist == 0``.
    """
    fn = bfs_numba if USE_NUMBA else bfs_numpy
    return fn(indptr, nbr, rel, fwd, start, h)
