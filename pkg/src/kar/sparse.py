"""Okapi BM25 over the document corpus."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels
from .corpus import KnowledgeBase
from .text import tokenize

__all__ = ["Bm25Index", "Bm25Params", "bm25_top_k", "build_bm25", "tokenize"]


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75


class Bm25Index:
    """Inverted index in CSR form; documents are numbered in ascending doc_id order."""

    def __init__(self, doc_ids, vocab, indptr, post_doc, post_tf, doc_len, params: Bm25Params):
        self.doc_ids: tuple[str, ...] = tuple(doc_ids)
        self.vocab: dict[str, int] = vocab
        self.terms: list[str] = sorted(vocab, key=vocab.__getitem__)
        self.indptr = indptr
        self.post_doc = post_doc
        self.post_tf = post_tf
        self.doc_len = doc_len
        self.params = params
        self.doc_count = len(self.doc_ids)
        self.avg_doc_length = float(doc_len.mean()) if self.doc_count else 0.0
        df = np.diff(indptr).astype(np.float64)
        n = float(self.doc_count)
        self.idf = np.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def postings(self, term: str) -> list[tuple[str, int]]:
        t = self.vocab.get(term)
        if t is None:
            return []
        lo, hi = self.indptr[t], self.indptr[t + 1]
        return [(self.doc_ids[d], int(tf)) for d, tf in zip(self.post_doc[lo:hi], self.post_tf[lo:hi])]

    def doc_freq(self, term: str) -> int:
        t = self.vocab.get(term)
        return 0 if t is None else int(self.indptr[t + 1] - self.indptr[t])

    def doc_length(self, doc_id: str) -> int:
        return int(self.doc_len[self.doc_ids.index(doc_id)])

    def scores(self, query_text: str) -> np.ndarray:
        term_ids = np.array([self.vocab[t] for t in tokenize(query_text) if t in self.vocab], dtype=np.int64)
        if term_ids.size == 0:
            return np.zeros(self.doc_count)
        # an all-empty corpus has avgdl 0; any positive value leaves the (zero-tf) result unchanged
        avgdl = self.avg_doc_length or 1.0
        return kernels.bm25_scores(
            self.indptr, self.post_doc, self.post_tf, self.doc_len, self.idf, term_ids,
            self.params.k1, self.params.b, avgdl, self.doc_count,
        )


def build_bm25(kb: KnowledgeBase, params: Bm25Params | None = None) -> Bm25Index:
    if len(kb) == 0:
        raise ValueError("cannot build BM25 over an empty corpus")
    params = params or Bm25Params()
    doc_ids = sorted(kb.documents)
    per_term: dict[str, list[tuple[int, int]]] = {}
    lengths = np.zeros(len(doc_ids), dtype=np.float64)
    for d, doc_id in enumerate(doc_ids):
        tokens = tokenize(kb.documents[doc_id].text)
        lengths[d] = len(tokens)
        for term, tf in Counter(tokens).items():
            per_term.setdefault(term, []).append((d, tf))
    vocab = {t: i for i, t in enumerate(sorted(per_term))}
    indptr = np.zeros(len(vocab) + 1, dtype=np.int64)
    post_doc, post_tf = [], []
    for t, term in enumerate(sorted(per_term)):
        plist = per_term[term]
        indptr[t + 1] = indptr[t] + len(plist)
        post_doc.extend(d for d, _ in plist)
        post_tf.extend(tf for _, tf in plist)
    return Bm25Index(
        doc_ids, vocab, indptr,
        np.asarray(post_doc, dtype=np.int64), np.asarray(post_tf, dtype=np.float64),
        lengths, params,
    )


def bm25_top_k(index: Bm25Index, query_text: str, k: int) -> list[tuple[str, float]]:
    """Top-``k`` documents by BM25; zero-score documents pad the tail in doc_id order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.scores(query_text)
    return [(index.doc_ids[i], float(scores[i])) for i in kernels.top_k(scores, k)]

