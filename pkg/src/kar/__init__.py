"""Knowledge-aware query expansion for semi-structured retrieval."""

from .corpus import DocStructure, Document, KnowledgeBase, QueryEntry, RelationEdge, ingest, load_queries, neighbors_within
from .embedding import EmbeddingCache, HashingEmbedder, OpenAIEmbedder, VectorIndex, build_index, embed, top_k_docs
from .evaluation import EvalReport, hit_at, mrr, recall_at, run_eval
from .expansion import STRATEGIES, ExpandedQuery, Pipeline, PipelineConfig, Trace
from .llm import GenRequest, MockLLM, OpenAIChat, generate, render
from .sparse import Bm25Index, bm25_top_k, build_bm25

__version__ = "0.1.0"

__all__ = [
    "Bm25Index", "DocStructure", "Document", "EmbeddingCache", "EvalReport", "ExpandedQuery", "GenRequest",
    "HashingEmbedder", "KnowledgeBase", "MockLLM", "OpenAIChat", "OpenAIEmbedder", "Pipeline", "PipelineConfig",
    "QueryEntry", "RelationEdge", "STRATEGIES", "Trace", "VectorIndex", "bm25_top_k", "build_bm25", "build_index",
    "embed", "generate", "hit_at", "ingest", "load_queries", "mrr", "neighbors_within", "recall_at", "render",
    "run_eval", "top_k_docs",
]
