"""Text embedding backends, an on-disk vector cache and an exact dot-product index."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import kernels
from ._http import TransportError, post_json
from .corpus import KnowledgeBase, normalize_text
from .text import content_tokens, tokenize

logger = logging.getLogger(__name__)

CACHE_FORMAT = "kar-embedding-cache"
CACHE_VERSION = 1


class EmbeddingError(RuntimeError):
    pass


class EmbedderBackend(Protocol):
    name: str
    dim: int | None
    batch_limit: int
    max_chars: int

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


@lru_cache(maxsize=1 << 16)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
    v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


class HashingEmbedder:
    """Deterministic offline embedder.

    Each content token maps to a fixed pseudo-random unit direction seeded by
    a hash of the token; a text is the term-frequency weighted sum of its
    token directions, scaled to unit length. Texts sharing vocabulary get
    correlated vectors, and the result is identical across processes.
    """

    def __init__(self, dim: int = 64, seed: int = 0, batch_limit: int = 256,
                 max_chars: int = 32_000, delay: float = 0.0) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.batch_limit = batch_limit
        self.max_chars = max_chars
        self.delay = delay
        self.calls = 0
        self.name = f"hash-d{dim}-s{seed}"

    def _one(self, text: str) -> np.ndarray:
        tokens = content_tokens(text) or tokenize(text) or [text]
        vec = np.zeros(self.dim)
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for tok in sorted(counts):
            vec += counts[tok] * _token_vector(tok, self.dim, self.seed)
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        self.calls += 1
        if self.delay:
            time.sleep(self.delay)
        return np.stack([self._one(t) for t in texts]) if texts else np.empty((0, self.dim))


class OpenAIEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint.

    The output dimension is whatever the endpoint reports; it is fixed by the
    first response and every later response must agree.
    """

    def __init__(self, base_url: str, model: str, api_key: str | None = None, *,
                 dim: int | None = None, batch_limit: int = 256, max_chars: int = 24_000,
                 timeout: float = 60.0, attempts: int = 3, backoff: float = 1.0) -> None:
        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.api_key = api_key
        self.dim = dim
        self.batch_limit = batch_limit
        self.max_chars = max_chars
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.name = f"openai:{model}"

    @classmethod
    def from_env(cls, **kwargs) -> "OpenAIEmbedder":
        return cls(
            base_url=os.environ.get("KAR_EMBED_URL", "https://api.openai.com/v1"),
            model=os.environ.get("KAR_EMBED_MODEL", "text-embedding-ada-002"),
            api_key=os.environ.get("KAR_API_KEY") or os.environ.get("OPENAI_API_KEY"),
            **kwargs,
        )

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        body = post_json(
            self.url, {"model": self.model, "input": list(texts)},
            api_key=self.api_key, timeout=self.timeout, attempts=self.attempts, backoff=self.backoff,
        )
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            out = np.asarray([d["embedding"] for d in data], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise EmbeddingError(f"unexpected embeddings response shape from {self.url}") from exc
        if out.ndim != 2 or out.shape[0] != len(texts):
            raise EmbeddingError(f"expected {len(texts)} embeddings, got shape {out.shape}")
        if self.dim is None:
            self.dim = out.shape[1]
        elif out.shape[1] != self.dim:
            raise EmbeddingError(f"dimension mismatch: expected {self.dim}, endpoint returned {out.shape[1]}")
        return out


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Append-only JSON-lines vector cache keyed by (backend name, content hash).

    Line 1 is a header ``{"format": "kar-embedding-cache", "version": 1}``;
    every following line is ``{"backend", "sha256", "dim", "values"}``.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._vectors: dict[tuple[str, str], np.ndarray] = {}
        if self.path.exists() and self.path.stat().st_size:
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION}) + "\n")

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
                raise EmbeddingError(f"{self.path}: unsupported cache header {header}")
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                vec = np.asarray(rec["values"], dtype=np.float64)
                if vec.shape != (rec["dim"],):
                    raise EmbeddingError(f"{self.path}: corrupt record for {rec['sha256']}")
                self._vectors[(rec["backend"], rec["sha256"])] = vec

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, backend: str, text: str) -> np.ndarray | None:
        return self._vectors.get((backend, content_hash(text)))

    def put_many(self, backend: str, texts: Sequence[str], vectors: np.ndarray) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            for text, vec in zip(texts, vectors):
                key = (backend, content_hash(text))
                if key in self._vectors:
                    continue
                self._vectors[key] = np.array(vec, dtype=np.float64)
                fh.write(json.dumps({"backend": backend, "sha256": key[1], "dim": len(vec),
                                     "values": [float(x) for x in vec]}) + "\n")


def embed(backend: EmbedderBackend, texts: Sequence[str], *, cache: EmbeddingCache | None = None,
          max_in_flight: int = 1) -> np.ndarray:
    """Embed ``texts`` in order; one row per input.

    Inputs are normalized, truncated to the backend's character budget, and
    sent in chunks of at most ``batch_limit``.
    """
    prepared = []
    for i, t in enumerate(texts):
        norm = normalize_text(t)
        if not norm:
            raise ValueError(f"empty text at position {i}")
        prepared.append(norm[: backend.max_chars])

    rows: list[np.ndarray | None] = [None] * len(prepared)
    todo = []
    for i, t in enumerate(prepared):
        hit = cache.get(backend.name, t) if cache is not None else None
        if hit is not None:
            rows[i] = hit
        else:
            todo.append(i)

    chunks = [todo[j:j + backend.batch_limit] for j in range(0, len(todo), backend.batch_limit)]

    def run(chunk: list[int]) -> np.ndarray:
        out = np.asarray(backend.embed_batch([prepared[i] for i in chunk]), dtype=np.float64)
        if out.shape[0] != len(chunk):
            raise EmbeddingError(f"backend {backend.name} returned {out.shape[0]} vectors for {len(chunk)} texts")
        if not np.all(np.isfinite(out)):
            raise EmbeddingError(f"backend {backend.name} returned non-finite values")
        return out

    if max_in_flight > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    for chunk, out in zip(chunks, results):
        for i, vec in zip(chunk, out):
            rows[i] = vec
        if cache is not None:
            cache.put_many(backend.name, [prepared[i] for i in chunk], out)

    if not rows:
        return np.empty((0, backend.dim or 0))
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise EmbeddingError(f"inconsistent embedding dimensions {sorted(dims)}")
    return np.stack(rows)


def embed_one(backend: EmbedderBackend, text: str, *, cache: EmbeddingCache | None = None) -> np.ndarray:
    return embed(backend, [text], cache=cache)[0]


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Raw dot product; vectors are never normalized here."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


@dataclass(frozen=True)
class VectorIndex:
    """Exact dense index; rows follow ascending doc_id order."""

    doc_ids: tuple[str, ...]
    matrix: np.ndarray
    backend: str = ""

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.doc_ids):
            raise ValueError("matrix must have one row per doc_id")
        if list(self.doc_ids) != sorted(self.doc_ids) or len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc_ids must be unique and sorted")
        matrix = np.array(self.matrix, dtype=np.float64)
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "_pos", {d: i for i, d in enumerate(self.doc_ids)})

    @classmethod
    def from_vectors(cls, vectors: dict[str, np.ndarray], backend: str = "") -> "VectorIndex":
        ids = tuple(sorted(vectors))
        if not ids:
            return cls((), np.empty((0, 0)), backend)
        return cls(ids, np.stack([np.asarray(vectors[i], dtype=np.float64) for i in ids]), backend)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def vector(self, doc_id: str) -> np.ndarray:
        return self.matrix[self._pos[doc_id]]

    def scores(self, query_vec: np.ndarray) -> np.ndarray:
        return self.matrix @ query_vec


def build_index(kb: KnowledgeBase, backend: EmbedderBackend, *, cache: EmbeddingCache | None = None,
                max_in_flight: int = 1) -> VectorIndex:
    ids = sorted(kb.documents)
    matrix = embed(backend, [kb.documents[i].text for i in ids], cache=cache, max_in_flight=max_in_flight)
    logger.info("built dense index: %d docs, dim %d, backend %s", len(ids), matrix.shape[1], backend.name)
    return VectorIndex(tuple(ids), matrix, backend.name)


def top_k_docs(index: VectorIndex, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
    """The ``k`` highest dot-product documents, ties by ascending doc_id."""
    if len(index) == 0:
        raise ValueError("empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (index.dim,):
        raise ValueError(f"dimension mismatch: index has {index.dim}, query has {query_vec.shape}")
    scores = index.scores(query_vec)
    return [(index.doc_ids[i], float(scores[i])) for i in kernels.top_k(scores, k)]


__all__ = [
    "EmbedderBackend", "EmbeddingCache", "EmbeddingError", "HashingEmbedder", "OpenAIEmbedder",
    "TransportError", "VectorIndex", "build_index", "embed", "embed_one", "similarity", "top_k_docs",
]
