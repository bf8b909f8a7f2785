"""Query expansion strategies: Base, PRF, HyDE, RAR, AGR, KAR and two KAR ablations."""

from __future__ import annotations

import dataclasses
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Protocol

import numpy as np

from . import kernels
from .corpus import Document, Hop, KnowledgeBase, neighbors_within
from .embedding import EmbedderBackend, EmbeddingCache, VectorIndex, build_index, embed, top_k_docs
from .llm import TRIPLE_ARROW, LlmBackend, prompt_and_generate
from .sparse import Bm25Index, bm25_top_k, build_bm25

logger = logging.getLogger(__name__)

STRATEGIES = ("base", "prf", "hyde", "rar", "agr", "kar", "kar_no_kg", "kar_no_drf")
RETRIEVERS = ("dense", "bm25")
DELIMITER = "\n"


class ExpansionError(RuntimeError):
    """A stage of an expansion chain failed."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    n: int = 3
    h: int = 2
    k: int = 10
    retriever: str = "dense"
    embed_backend: str = "hash"
    llm_backend: str = "mock"
    entity_fanout: int = 1
    triple_cap_factor: int = 4
    agr_context_docs: int = 9
    depth: int = 100

    def __post_init__(self) -> None:
        for name in ("n", "h", "k", "entity_fanout", "triple_cap_factor", "agr_context_docs", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.retriever not in RETRIEVERS:
            raise ValueError(f"unknown retriever {self.retriever!r}; expected one of {RETRIEVERS}")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


class Trace:
    """Per-query record of intermediate results and stage latencies (seconds)."""

    def __init__(self) -> None:
        self.data: dict = {"prompts": [], "completions": []}
        self.latency: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        except ExpansionError:
            raise
        except Exception as exc:
            raise ExpansionError(name, exc) from exc
        finally:
            self.latency[name] = self.latency.get(name, 0.0) + time.perf_counter() - t0

    def to_json(self) -> dict:
        return dict(self.data)


# ---------------------------------------------------------------------------
# retrievers and shared resources
# ---------------------------------------------------------------------------


class Retriever(Protocol):
    name: str

    def search(self, text: str, k: int) -> list[tuple[str, float]]: ...


class DenseRetriever:
    name = "dense"

    def __init__(self, index: VectorIndex, embedder: EmbedderBackend, cache: EmbeddingCache | None = None):
        self.index = index
        self.embedder = embedder
        self.cache = cache

    def search(self, text: str, k: int) -> list[tuple[str, float]]:
        return top_k_docs(self.index, embed(self.embedder, [text], cache=self.cache)[0], k)


class Bm25Retriever:
    name = "bm25"

    def __init__(self, index: Bm25Index):
        self.index = index

    def search(self, text: str, k: int) -> list[tuple[str, float]]:
        return bm25_top_k(self.index, text, k)


class Pipeline:
    """Knowledge base, indexes and backends shared by every strategy.

    The dense index is always built: KAR's entity lookup and relation
    filtering use embeddings even when BM25 is the configured retriever.
    """

    def __init__(self, kb: KnowledgeBase, embedder: EmbedderBackend, llm: LlmBackend,
                 config: PipelineConfig | None = None, *, cache: EmbeddingCache | None = None,
                 index: VectorIndex | None = None, bm25: Bm25Index | None = None) -> None:
        self.kb = kb
        self.embedder = embedder
        self.llm = llm
        self.config = config or PipelineConfig()
        self.cache = cache
        self.index = index if index is not None else build_index(kb, embedder, cache=cache)
        self.bm25 = bm25
        if self.config.retriever == "bm25" and self.bm25 is None:
            self.bm25 = build_bm25(kb)
        self.dense = DenseRetriever(self.index, embedder, cache)

    @property
    def retriever(self) -> Retriever:
        if self.config.retriever == "bm25":
            return Bm25Retriever(self.bm25)
        return self.dense

    def with_config(self, config: PipelineConfig) -> "Pipeline":
        return Pipeline(self.kb, self.embedder, self.llm, config, cache=self.cache,
                        index=self.index, bm25=self.bm25)

    def embed_query(self, text: str) -> np.ndarray:
        return embed(self.embedder, [text], cache=self.cache)[0]

    def expand(self, strategy: str, query: str, trace: Trace | None = None) -> "ExpandedQuery":
        if strategy not in STRATEGY_FUNCS:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        trace = trace if trace is not None else Trace()
        trace.data["strategy"] = strategy
        eq = STRATEGY_FUNCS[strategy](self, query, trace)
        trace.data["combined"] = eq.combined
        return eq


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpandedQuery:
    original: str
    expansions: tuple[str, ...] = ()

    @property
    def combined(self) -> str:
        return DELIMITER.join((self.original, *self.expansions))

    def to_json(self) -> dict:
        return {"original": self.original, "expansions": list(self.expansions), "combined": self.combined}


@dataclass(frozen=True)
class ParsedEntities:
    mentions: tuple[str, ...]
    raw: str = ""
    includes_query: bool = True


@dataclass(frozen=True)
class ScoredNeighbor:
    node_id: str
    rel_path: tuple[Hop, ...]
    hops: int
    score: float

    @property
    def rel_label(self) -> str:
        return " → ".join(hop.render() for hop in self.rel_path)

    def to_json(self) -> dict:
        return {"node_id": self.node_id, "rel_label": self.rel_label, "hops": self.hops, "score": self.score}


@dataclass(frozen=True)
class DocumentTriple:
    src_doc: Document
    rel_label: str
    dst_doc: Document
    score: float = 0.0

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.src_doc.doc_id, self.rel_label, self.dst_doc.doc_id)

    def serialize(self) -> str:
        return f"{self.src_doc.text} --[{self.rel_label}{TRIPLE_ARROW}{self.dst_doc.text}"

    def to_json(self) -> dict:
        return {"src": self.src_doc.doc_id, "rel_label": self.rel_label, "dst": self.dst_doc.doc_id,
                "score": self.score}


def _check_query(q: str) -> str:
    if not q or not q.strip():
        raise ValueError("empty query")
    return q


def _generate(p: Pipeline, trace: Trace, template_id: str, bindings: dict, n: int) -> list[str]:
    with trace.stage(f"llm:{template_id}"):
        prompt, out = prompt_and_generate(p.llm, template_id, bindings, n)
    trace.data["prompts"].append({"template": template_id, "prompt": prompt})
    trace.data["completions"].append({"template": template_id, "texts": out})
    return out


def _initial_docs(p: Pipeline, trace: Trace, text: str, n: int, stage: str = "initial_retrieval") -> list[str]:
    with trace.stage(stage):
        hits = p.retriever.search(text, n)
    trace.data.setdefault(stage, []).extend(d for d, _ in hits)
    return [p.kb.documents[d].text for d, _ in hits]


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def expand_base(q: str) -> ExpandedQuery:
    return ExpandedQuery(_check_query(q))


def expand_prf(p: Pipeline, q: str, n: int | None = None, trace: Trace | None = None) -> ExpandedQuery:
    """Append the texts of the top-``n`` initially retrieved documents."""
    _check_query(q)
    trace = trace or Trace()
    return ExpandedQuery(q, tuple(_initial_docs(p, trace, q, n or p.config.n)))


def expand_hyde(p: Pipeline, q: str, n: int | None = None, trace: Trace | None = None) -> ExpandedQuery:
    _check_query(q)
    trace = trace or Trace()
    bindings = {"doc_struct": p.kb.structure.render(), "query": q}
    return ExpandedQuery(q, tuple(_generate(p, trace, "hyde", bindings, n or p.config.n)))


def expand_rar(p: Pipeline, q: str, n: int | None = None, trace: Trace | None = None) -> ExpandedQuery:
    _check_query(q)
    trace = trace or Trace()
    n = n or p.config.n
    docs = _initial_docs(p, trace, q, n)
    bindings = {"doc_struct": p.kb.structure.render(), "prf_docs": docs, "query": q}
    return ExpandedQuery(q, tuple(_generate(p, trace, "rar", bindings, n)))


def expand_agr(p: Pipeline, q: str, n: int | None = None, trace: Trace | None = None) -> ExpandedQuery:
    """Extract, Analyze, Generate (twice) and Refine: five LLM inferences.

    The second generation is grounded in documents retrieved with the query
    plus the first generated document.
    """
    _check_query(q)
    trace = trace or Trace()
    n = n or p.config.n
    struct = p.kb.structure.render()
    keywords = _generate(p, trace, "agr_extract", {"query": q}, 1)[0]
    analysis = _generate(p, trace, "agr_analyze", {"extracted_keywords": keywords, "query": q}, 1)[0]
    draft = _generate(p, trace, "agr_generate1",
                      {"doc_struct": struct, "query_analysis": analysis, "query": q}, 1)[0]
    retrieval_text = DELIMITER.join((q, draft)) if draft else q
    trace.data["agr_retrieval_query"] = retrieval_text
    docs = _initial_docs(p, trace, retrieval_text, p.config.agr_context_docs)
    candidates = _generate(p, trace, "agr_generate2",
                           {"doc_struct": struct, "retrieved_docs": docs, "query": q}, n)
    final = _generate(p, trace, "agr_refine", {"generated_docs": candidates, "query": q}, n)
    return ExpandedQuery(q, tuple(final))


# ---------------------------------------------------------------------------
# KAR
# ---------------------------------------------------------------------------


def split_entity_blocks(text: str) -> list[str]:
    """Top-level balanced ``{...}`` blocks of ``text``, in order."""
    blocks, depth, start = [], 0, -1
    for i, ch in enumerate(text):
        if ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                blocks.append(text[start:i + 1])
    return blocks


def kar_parse_entities(p: Pipeline, q: str, trace: Trace | None = None) -> ParsedEntities:
    """LLM-written pseudo-documents for the entities named in ``q``, plus ``q`` itself."""
    trace = trace or Trace()
    raw = _generate(p, trace, "kar_parse", {"doc_struct": p.kb.structure.render(), "query": q}, 1)[0]
    blocks = split_entity_blocks(raw)
    if raw.strip() and not blocks:
        logger.warning("could not parse entity blocks from LLM output; using the query only")
    parsed = ParsedEntities(tuple(blocks) + (q,), raw)
    trace.data["parsed_entities"] = list(parsed.mentions)
    return parsed


def kar_entity_docs(p: Pipeline, parsed: ParsedEntities, trace: Trace | None = None) -> list[tuple[str, str]]:
    """Nearest document(s) for every mention, duplicates preserved."""
    trace = trace or Trace()
    fanout = p.config.entity_fanout
    with trace.stage("entity_retrieval"):
        vecs = embed(p.embedder, list(parsed.mentions), cache=p.cache)
        out = [(m, doc_id) for m, v in zip(parsed.mentions, vecs) for doc_id, _ in top_k_docs(p.index, v, fanout)]
    trace.data["entity_docs"] = [{"mention": m, "doc_id": d} for m, d in out]
    return out


def kar_filter_relations(p: Pipeline, query_vec: np.ndarray, seeds: list[str], h: int, k: int, *,
                         by_name: bool = False) -> dict[str, list[ScoredNeighbor]]:
    """Top-``k`` neighbors within ``h`` hops of each seed node.

    Neighbors are scored by the dot product of their document embedding with
    the query embedding; ``by_name`` embeds only the entity name (first
    declared attribute) instead. Ties go to the smaller node_id.
    """
    kb = p.kb
    result: dict[str, list[ScoredNeighbor]] = {}
    for seed in seeds:
        pool = sorted(neighbors_within(kb, seed, h), key=lambda nb: nb.node_id)
        if not pool:
            result[seed] = []
            continue
        docs = [kb.doc_of(nb.node_id) for nb in pool]
        if by_name:
            vecs = embed(p.embedder, [kb.entity_name(d) for d in docs], cache=p.cache)
        else:
            vecs = np.stack([p.index.vector(d.doc_id) for d in docs])
        scores = vecs @ query_vec
        result[seed] = [
            ScoredNeighbor(pool[i].node_id, pool[i].rel_path, pool[i].hops, float(scores[i]))
            for i in kernels.top_k(scores, k)
        ]
    return result


def kar_build_triples(kb: KnowledgeBase, seeds: list[str], filtered: dict[str, list[ScoredNeighbor]],
                      cap: int | None = None) -> list[DocumentTriple]:
    """One (source doc, relation path, neighbor doc) triple per kept neighbor.

    Per-seed lists are concatenated in seed order and deduplicated; when more
    than ``cap`` remain, the lowest-scored are dropped.
    """
    triples: list[DocumentTriple] = []
    seen: set[tuple[str, str, str]] = set()
    for seed in seeds:
        src = kb.doc_of(seed)
        for nb in filtered.get(seed, []):
            t = DocumentTriple(src, nb.rel_label, kb.doc_of(nb.node_id), nb.score)
            if t.key not in seen:
                seen.add(t.key)
                triples.append(t)
    if cap is not None and len(triples) > cap:
        keep = sorted(range(len(triples)), key=lambda i: (-triples[i].score, i))[:cap]
        triples = [triples[i] for i in sorted(keep)]
    return triples


def _kar_seeds(p: Pipeline, q: str, trace: Trace) -> tuple[ParsedEntities, list[tuple[str, str]], list[str]]:
    parsed = kar_parse_entities(p, q, trace)
    entity_docs = kar_entity_docs(p, parsed, trace)
    seeds = list(dict.fromkeys(p.kb.node_of(d) for _, d in entity_docs))
    return parsed, entity_docs, seeds


def _kar(p: Pipeline, q: str, trace: Trace, by_name: bool) -> ExpandedQuery:
    _check_query(q)
    cfg = p.config
    _, _, seeds = _kar_seeds(p, q, trace)
    with trace.stage("relation_filtering"):
        qvec = p.embed_query(q)
        filtered = kar_filter_relations(p, qvec, seeds, cfg.h, cfg.k, by_name=by_name)
        triples = kar_build_triples(p.kb, seeds, filtered, cap=cfg.triple_cap_factor * cfg.k)
    trace.data["scored_neighbors"] = {s: [nb.to_json() for nb in v] for s, v in filtered.items()}
    trace.data["triples"] = [t.to_json() for t in triples]
    bindings = {"doc_struct": p.kb.structure.render(),
                "document_triples": [t.serialize() for t in triples], "query": q}
    return ExpandedQuery(q, tuple(_generate(p, trace, "kar_generate", bindings, cfg.n)))


def expand_kar(p: Pipeline, q: str, trace: Trace | None = None) -> ExpandedQuery:
    return _kar(p, q, trace or Trace(), by_name=False)


def expand_kar_no_drf(p: Pipeline, q: str, trace: Trace | None = None) -> ExpandedQuery:
    return _kar(p, q, trace or Trace(), by_name=True)


def expand_kar_no_kg(p: Pipeline, q: str, trace: Trace | None = None) -> ExpandedQuery:
    """KAR without the graph: generate from the entity documents alone."""
    _check_query(q)
    trace = trace or Trace()
    _, entity_docs, _ = _kar_seeds(p, q, trace)
    doc_ids = list(dict.fromkeys(d for _, d in entity_docs))
    bindings = {"doc_struct": p.kb.structure.render(),
                "document_triples": [p.kb.documents[d].text for d in doc_ids], "query": q}
    return ExpandedQuery(q, tuple(_generate(p, trace, "kar_generate", bindings, p.config.n)))


STRATEGY_FUNCS: dict[str, Callable[[Pipeline, str, Trace], ExpandedQuery]] = {
    "base": lambda p, q, t: expand_base(q),
    "prf": lambda p, q, t: expand_prf(p, q, trace=t),
    "hyde": lambda p, q, t: expand_hyde(p, q, trace=t),
    "rar": lambda p, q, t: expand_rar(p, q, trace=t),
    "agr": lambda p, q, t: expand_agr(p, q, trace=t),
    "kar": lambda p, q, t: expand_kar(p, q, trace=t),
    "kar_no_kg": lambda p, q, t: expand_kar_no_kg(p, q, trace=t),
    "kar_no_drf": lambda p, q, t: expand_kar_no_drf(p, q, trace=t),
}
