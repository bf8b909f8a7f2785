"""Time the numba and pure-numpy kernel paths on synthetic inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Both paths are called directly, so the ``KAR_DISABLE_NUMBA`` flag does not
matter here. Results are checked for equality before timing.
"""

from __future__ import annotations

import argparse
import random
import statistics
import time

import numpy as np

from kar import kernels
from kar.corpus import DocStructure, Document, KnowledgeBase, RelationEdge
from kar.sparse import build_bm25


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def graph_kb(n_nodes: int, n_edges: int, seed: int) -> KnowledgeBase:
    rng = random.Random(seed)
    nodes = [f"n{i:07d}" for i in range(n_nodes)]
    edges = {(rng.choice(nodes), f"r{rng.randint(0, 7)}", rng.choice(nodes)) for _ in range(n_edges)}
    docs = [Document(n, "t", n, {}) for n in nodes]
    return KnowledgeBase(docs, [RelationEdge(*e) for e in edges], DocStructure.from_mapping({"t": ["name"]}))


def text_kb(n_docs: int, seed: int) -> KnowledgeBase:
    rng = random.Random(seed)
    vocab = [f"w{i}" for i in range(5000)]
    weights = [1.0 / (i + 1) for i in range(len(vocab))]
    docs = [Document(f"d{i:07d}", "t", " ".join(rng.choices(vocab, weights, k=rng.randint(20, 200))), {})
            for i in range(n_docs)]
    return KnowledgeBase(docs, [], DocStructure.from_mapping({"t": ["name"]}))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies every input size")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    rows = []

    n = int(1_000_000 * args.scale)
    scores = rng.standard_normal(n)
    for k in (10, 100):
        assert np.array_equal(kernels.top_k_numba(scores, k), kernels.top_k_numpy(scores, k))
        rows.append((f"top_k n={n} k={k}", best_of(lambda: kernels.top_k_numpy(scores, k), args.repeat),
                     best_of(lambda: kernels.top_k_numba(scores, k), args.repeat)))

    index = build_bm25(text_kb(int(20_000 * args.scale), 1))
    terms = np.array(rng.choice(len(index.terms), size=12, replace=False), dtype=np.int64)
    bm25_args = (index.indptr, index.post_doc, index.post_tf, index.doc_len, index.idf, terms,
                 1.2, 0.75, index.avg_doc_length, index.doc_count)
    assert np.allclose(kernels.bm25_scores_numba(*bm25_args), kernels.bm25_scores_numpy(*bm25_args), atol=1e-12)
    rows.append((f"bm25 docs={index.doc_count} terms=12", best_of(lambda: kernels.bm25_scores_numpy(*bm25_args), args.repeat),
                 best_of(lambda: kernels.bm25_scores_numba(*bm25_args), args.repeat)))

    kb = graph_kb(int(100_000 * args.scale), int(600_000 * args.scale), 2)
    adj = (kb._indptr, kb._adj_nbr, kb._adj_rel, kb._adj_fwd)
    starts = rng.integers(0, len(kb.node_ids), size=20)
    for h in (2, 3):
        for s in starts[:3]:
            for a, b in zip(kernels.bfs_numba(*adj, s, h), kernels.bfs_numpy(*adj, s, h)):
                assert np.array_equal(a, b)
        rows.append((f"bfs nodes={len(kb.node_ids)} h={h} x{len(starts)}",
                     best_of(lambda: [kernels.bfs_numpy(*adj, s, h) for s in starts], args.repeat),
                     best_of(lambda: [kernels.bfs_numba(*adj, s, h) for s in starts], args.repeat)))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e3:>10.2f}  {t_nb * 1e3:>10.2f}  {t_np / t_nb:>7.1f}x")
    print(f"(best of {args.repeat}; numba timings exclude JIT compilation; median speedup "
          f"{statistics.median([r[1] / r[2] for r in rows]):.1f}x)")


if __name__ == "__main__":
    main()
