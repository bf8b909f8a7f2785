"""Document store, knowledge graph, ingestion and h-hop neighbor propagation."""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

STRUCTURES_DIR = Path(__file__).parent / "structures"


class IngestError(ValueError):
    """Raised for malformed or inconsistent corpus input."""


def normalize_text(text: str) -> str:
    """Drop control characters and collapse whitespace runs to single spaces."""
    chars = []
    for ch in text:
        if ch.isspace():
            chars.append(" ")
        elif unicodedata.category(ch) == "Cc":
            continue
        else:
            chars.append(ch)
    return " ".join("".join(chars).split())


@dataclass(frozen=True)
class Document:
    doc_id: str
    entity_type: str
    text: str
    attrs: Mapping[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "entity_type": self.entity_type,
            "text": self.text,
            "attrs": dict(self.attrs),
        }


@dataclass(frozen=True)
class RelationEdge:
    src: str
    rel_type: str
    dst: str

    def to_json(self) -> dict:
        return {"src": self.src, "rel_type": self.rel_type, "dst": self.dst}


class Hop(NamedTuple):
    rel_type: str
    forward: bool

    def render(self) -> str:
        return self.rel_type if self.forward else f"{self.rel_type} (inverse)"


class Neighbor(NamedTuple):
    node_id: str
    rel_path: tuple[Hop, ...]
    hops: int


@dataclass(frozen=True)
class DocStructure:
    """Entity types and their ordered attribute names, as shown to the LLM."""

    entity_types: Mapping[str, tuple[str, ...]]

    @classmethod
    def from_mapping(cls, data: Mapping[str, Iterable[str]]) -> "DocStructure":
        if not isinstance(data, Mapping) or not data:
            raise IngestError("document structure must be a non-empty JSON object")
        types: dict[str, tuple[str, ...]] = {}
        for name, attrs in data.items():
            if isinstance(attrs, str) or not all(isinstance(a, str) for a in attrs):
                raise IngestError(f"attributes of entity type {name!r} must be a list of strings")
            types[name] = tuple(attrs)
        return cls(types)

    @classmethod
    def load(cls, path: str | Path) -> "DocStructure":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IngestError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_mapping(data)

    @classmethod
    def builtin(cls, dataset: str) -> "DocStructure":
        """Structure of one of the bundled datasets: ``amazon``, ``mag`` or ``prime``."""
        path = STRUCTURES_DIR / f"{dataset.lower()}.json"
        if not path.exists():
            raise KeyError(f"no bundled document structure named {dataset!r}")
        return cls.load(path)

    def first_attribute(self, entity_type: str) -> str | None:
        attrs = self.entity_types.get(entity_type, ())
        return attrs[0] if attrs else None

    def render(self) -> str:
        lines = ["{"]
        items = list(self.entity_types.items())
        for i, (name, attrs) in enumerate(items):
            sep = "," if i < len(items) - 1 else ""
            lines.append(f"    {json.dumps(name)}: {json.dumps(list(attrs))}{sep}")
        lines.append("}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {k: list(v) for k, v in self.entity_types.items()}


@dataclass(frozen=True)
class IngestReport:
    entities: int
    relations: int
    avg_degree: float
    whitespace_tokens: int

    def to_json(self) -> dict:
        return {
            "entities": self.entities,
            "relations": self.relations,
            "avg_degree": self.avg_degree,
            "whitespace_tokens": self.whitespace_tokens,
        }


def average_degree(entities: int, relations: int) -> float:
    return 2.0 * relations / entities if entities else 0.0


class KnowledgeBase:
    """Documents plus a typed relation graph; immutable once constructed.

    Every document owns exactly one node. Node ids default to the document id
    and may be overridden per record with a ``node_id`` field.
    """

    def __init__(
        self,
        documents: Iterable[Document],
        edges: Iterable[RelationEdge],
        structure: DocStructure,
        node_ids: Mapping[str, str] | None = None,
    ) -> None:
        self.structure = structure
        self.documents: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in self.documents:
                raise IngestError(f"duplicate doc_id {doc.doc_id!r}")
            if doc.entity_type not in structure.entity_types:
                raise IngestError(f"document {doc.doc_id!r} has undeclared entity type {doc.entity_type!r}")
            if not doc.text:
                raise IngestError(f"document {doc.doc_id!r} has empty text")
            self.documents[doc.doc_id] = doc

        node_ids = node_ids or {}
        self._doc_to_node: dict[str, str] = {d: node_ids.get(d, d) for d in self.documents}
        self._node_to_doc: dict[str, str] = {}
        for doc_id, node_id in self._doc_to_node.items():
            if node_id in self._node_to_doc:
                raise IngestError(f"node {node_id!r} is linked to more than one document")
            self._node_to_doc[node_id] = doc_id

        self.node_ids: list[str] = sorted(self._node_to_doc)
        self._node_index = {n: i for i, n in enumerate(self.node_ids)}

        seen: set[RelationEdge] = set()
        self.edges: list[RelationEdge] = []
        for edge in edges:
            for end in (edge.src, edge.dst):
                if end not in self._node_index:
                    raise IngestError(f"edge {edge.to_json()} has dangling endpoint {end!r}")
            if edge in seen:
                continue
            seen.add(edge)
            self.edges.append(edge)

        self.rel_types: list[str] = sorted({e.rel_type for e in self.edges})
        self._build_adjacency()

    def _build_adjacency(self) -> None:
        rel_index = {r: i for i, r in enumerate(self.rel_types)}
        m = len(self.edges)
        src = np.fromiter((self._node_index[e.src] for e in self.edges), dtype=np.int64, count=m)
        dst = np.fromiter((self._node_index[e.dst] for e in self.edges), dtype=np.int64, count=m)
        rel = np.fromiter((rel_index[e.rel_type] for e in self.edges), dtype=np.int64, count=m)
        rows = np.concatenate((src, dst))
        cols = np.concatenate((dst, src))
        rels = np.concatenate((rel, rel))
        fwd = np.concatenate((np.ones(m, dtype=np.uint8), np.zeros(m, dtype=np.uint8)))
        order = np.lexsort((1 - fwd, rels, cols, rows))
        self._adj_nbr = np.ascontiguousarray(cols[order])
        self._adj_rel = np.ascontiguousarray(rels[order])
        self._adj_fwd = np.ascontiguousarray(fwd[order])
        counts = np.bincount(rows, minlength=len(self.node_ids))
        self._indptr = np.zeros(len(self.node_ids) + 1, dtype=np.int64)
        np.cumsum(counts, out=self._indptr[1:])

    # -- lookups -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.documents)

    def document(self, doc_id: str) -> Document:
        return self.documents[doc_id]

    def node_of(self, doc_id: str) -> str:
        return self._doc_to_node[doc_id]

    def doc_of(self, node_id: str) -> Document:
        return self.documents[self._node_to_doc[node_id]]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_index

    def neighbors(self, node_id: str) -> list[tuple[str, str, bool]]:
        """Adjacent ``(node_id, rel_type, forward)`` entries, each listed once."""
        i = self._node_index[node_id]
        lo, hi = self._indptr[i], self._indptr[i + 1]
        return [
            (self.node_ids[self._adj_nbr[p]], self.rel_types[self._adj_rel[p]], bool(self._adj_fwd[p]))
            for p in range(lo, hi)
        ]

    def entity_name(self, doc: Document) -> str:
        """Value of the first declared attribute (title/name); falls back to the text."""
        attr = self.structure.first_attribute(doc.entity_type)
        if attr is not None and doc.attrs.get(attr):
            return doc.attrs[attr]
        return doc.text

    @property
    def avg_degree(self) -> float:
        return average_degree(len(self.node_ids), len(self.edges))

    def report(self) -> IngestReport:
        return IngestReport(
            entities=len(self.node_ids),
            relations=len(self.edges),
            avg_degree=self.avg_degree,
            whitespace_tokens=sum(len(d.text.split()) for d in self.documents.values()),
        )

    # -- export ------------------------------------------------------------

    def export_edges(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for edge in self.edges:
                fh.write(json.dumps(edge.to_json(), ensure_ascii=False) + "\n")

    def export_documents(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for doc in self.documents.values():
                rec = doc.to_json()
                if self._doc_to_node[doc.doc_id] != doc.doc_id:
                    rec["node_id"] = self._doc_to_node[doc.doc_id]
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def neighbors_within(kb: KnowledgeBase, start: str, h: int) -> list[Neighbor]:
    """All nodes within ``h`` hops of ``start``, edges traversed both ways.

    Each node is returned once with its minimum hop count and one shortest
    relation path; among equally short paths the one through the
    lexicographically smallest predecessor wins. Sorted by (hops, node_id).
    """
    if not kb.has_node(start):
        raise KeyError(f"unknown node {start!r}")
    if h < 1:
        raise ValueError("hop count must be >= 1")
    s = kb._node_index[start]
    dist, parent, prel, pfwd = kernels.bfs(kb._indptr, kb._adj_nbr, kb._adj_rel, kb._adj_fwd, s, h)
    reached = np.flatnonzero(dist > 0)
    out = []
    for v in reached[np.lexsort((reached, dist[reached]))]:
        path = []
        u = int(v)
        while u != s:
            path.append(Hop(kb.rel_types[prel[u]], bool(pfwd[u])))
            u = int(parent[u])
        out.append(Neighbor(kb.node_ids[v], tuple(reversed(path)), int(dist[v])))
    return out


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------


def _read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise IngestError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def _require_str(rec: dict, key: str, where: str) -> str:
    value = rec.get(key)
    if not isinstance(value, str):
        raise IngestError(f"{where}: field {key!r} missing or not a string")
    return value


def read_documents(path: str | Path) -> tuple[list[Document], dict[str, str]]:
    docs: list[Document] = []
    node_ids: dict[str, str] = {}
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        doc_id = _require_str(rec, "doc_id", where)
        if doc_id in seen:
            raise IngestError(f"{where}: duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        attrs = rec.get("attrs", {})
        if not isinstance(attrs, dict):
            raise IngestError(f"{where}: field 'attrs' must be an object")
        text = normalize_text(_require_str(rec, "text", where))
        if not text:
            raise IngestError(f"{where}: document {doc_id!r} has empty text")
        docs.append(
            Document(
                doc_id=doc_id,
                entity_type=_require_str(rec, "entity_type", where),
                text=text,
                attrs={str(k): normalize_text(str(v)) for k, v in attrs.items()},
            )
        )
        if "node_id" in rec:
            node_ids[doc_id] = _require_str(rec, "node_id", where)
    return docs, node_ids


def read_edges(path: str | Path) -> list[tuple[int, RelationEdge]]:
    edges = []
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        edges.append(
            (lineno, RelationEdge(_require_str(rec, "src", where), _require_str(rec, "rel_type", where), _require_str(rec, "dst", where)))
        )
    return edges


def ingest(doc_file: str | Path, edge_file: str | Path, structure_file: str | Path) -> KnowledgeBase:
    structure = DocStructure.load(structure_file)
    docs, node_ids = read_documents(doc_file)
    for doc in docs:
        if doc.entity_type not in structure.entity_types:
            raise IngestError(f"{doc_file}: document {doc.doc_id!r} has undeclared entity type {doc.entity_type!r}")
    known = {node_ids.get(d.doc_id, d.doc_id) for d in docs}
    numbered = read_edges(edge_file)
    for lineno, edge in numbered:
        for end in (edge.src, edge.dst):
            if end not in known:
                raise IngestError(f"{edge_file}:{lineno}: edge {edge.to_json()} has dangling endpoint {end!r}")
    kb = KnowledgeBase(docs, (e for _, e in numbered), structure, node_ids)
    r = kb.report()
    logger.info(
        "ingested %d entities, %d relations (avg degree %.2f, %d whitespace tokens)",
        r.entities, r.relations, r.avg_degree, r.whitespace_tokens,
    )
    return kb


# ---------------------------------------------------------------------------
# query sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryEntry:
    query_id: str
    query: str
    answer_ids: tuple[str, ...]

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "query": self.query, "answer_ids": list(self.answer_ids)}


def load_queries(path: str | Path, kb: KnowledgeBase | None = None) -> list[QueryEntry]:
    entries = []
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        qid = _require_str(rec, "query_id", where)
        if qid in seen:
            raise IngestError(f"{where}: duplicate query_id {qid!r}")
        seen.add(qid)
        answers = rec.get("answer_ids")
        if not isinstance(answers, list) or not answers or not all(isinstance(a, str) for a in answers):
            raise IngestError(f"{where}: 'answer_ids' must be a non-empty list of strings")
        if kb is not None:
            missing = [a for a in answers if a not in kb.documents]
            if missing:
                raise IngestError(f"{where}: unknown answer doc ids {missing}")
        query = normalize_text(_require_str(rec, "query", where))
        if not query:
            raise IngestError(f"{where}: empty query")
        entries.append(QueryEntry(qid, query, tuple(dict.fromkeys(answers))))
    return entries
