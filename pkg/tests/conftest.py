from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

import kar
from kar.corpus import DocStructure, Document, KnowledgeBase, RelationEdge, ingest, load_queries
from kar.embedding import HashingEmbedder
from kar.expansion import Pipeline, PipelineConfig
from kar.llm import MockLLM

MICRO = Path(kar.__file__).parent / "data" / "micro"
GOLDEN = Path(__file__).parent / "golden"
MICRO_DIM = json.loads((MICRO / "manifest.json").read_text())["backend_embed"].split(":")[1]


@pytest.fixture(scope="session")
def micro_dir() -> Path:
    return MICRO


@pytest.fixture(scope="session")
def micro_kb() -> KnowledgeBase:
    return ingest(MICRO / "docs.jsonl", MICRO / "edges.jsonl", MICRO / "structure.json")


@pytest.fixture(scope="session")
def micro_queries(micro_kb):
    return load_queries(MICRO / "queries.jsonl", micro_kb)


@pytest.fixture(scope="session")
def micro_embedder() -> HashingEmbedder:
    return HashingEmbedder(dim=int(MICRO_DIM))


@pytest.fixture(scope="session")
def micro_pipeline(micro_kb, micro_embedder) -> Pipeline:
    return Pipeline(micro_kb, micro_embedder, MockLLM(), PipelineConfig())


def make_pipeline(kb, **config) -> Pipeline:
    return Pipeline(kb, HashingEmbedder(dim=int(MICRO_DIM)), MockLLM(), PipelineConfig(**config))


def random_graph(rng: random.Random, n_nodes: int, n_edges: int, n_rels: int = 3):
    """Random typed multigraph as (node ids, duplicate-free edge list)."""
    nodes = [f"n{i:03d}" for i in range(n_nodes)]
    rels = [f"r{j}" for j in range(n_rels)]
    edges = {(rng.choice(nodes), rng.choice(rels), rng.choice(nodes)) for _ in range(n_edges)}
    return nodes, sorted(edges)


def kb_from_graph(nodes, edges) -> KnowledgeBase:
    structure = DocStructure.from_mapping({"thing": ["name"]})
    docs = [Document(n, "thing", f"thing: name: {n}.", {"name": n}) for n in nodes]
    return KnowledgeBase(docs, [RelationEdge(*e) for e in edges], structure)
