"""Retrieval metrics, evaluation runs, parameter sweeps and latency accounting."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import QueryEntry
from .expansion import ExpansionError, Pipeline, Trace

logger = logging.getLogger(__name__)

METRICS = ("hit@1", "hit@5", "recall@20", "mrr")
RANK_CUTOFF = 20


def hit_at(ranked: Sequence[str], answers: Iterable[str], c: int) -> int:
    if c < 1:
        raise ValueError("cutoff must be >= 1")
    answers = set(answers)
    return int(any(d in answers for d in ranked[:c]))


def recall_at(ranked: Sequence[str], answers: Iterable[str], c: int) -> float:
    if c < 1:
        raise ValueError("cutoff must be >= 1")
    answers = set(answers)
    if not answers:
        raise ValueError("answer set is empty")
    return len(answers.intersection(ranked[:c])) / len(answers)


def first_answer_rank(ranked: Sequence[str], answers: Iterable[str]) -> int | None:
    answers = set(answers)
    for i, d in enumerate(ranked, start=1):
        if d in answers:
            return i
    return None


def mrr(ranked: Sequence[str], answers: Iterable[str]) -> float:
    """Reciprocal rank of the first answer; 0 when none was retrieved."""
    rank = first_answer_rank(ranked, answers)
    return 0.0 if rank is None else 1.0 / rank


def score_ranking(ranked: Sequence[str], answers: Iterable[str]) -> dict[str, float]:
    answers = set(answers)
    return {
        "hit@1": float(hit_at(ranked, answers, 1)),
        "hit@5": float(hit_at(ranked, answers, 5)),
        "recall@20": recall_at(ranked, answers, 20),
        "mrr": mrr(ranked, answers),
    }


@dataclass
class QueryResult:
    query_id: str
    query: str
    answer_ids: tuple[str, ...]
    ranked_doc_ids: tuple[str, ...]
    first_answer_rank: int | None
    metrics: dict[str, float]
    combined_query: str = ""
    error: str | None = None
    stage_latencies: dict[str, float] = field(default_factory=dict)
    expansion_latency: float = 0.0
    total_latency: float = 0.0

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "answer_ids": list(self.answer_ids),
            "ranked_doc_ids": list(self.ranked_doc_ids),
            "first_answer_rank": self.first_answer_rank,
            "metrics": self.metrics,
            "error": self.error,
        }


def _percent_means(rows: Sequence[QueryResult]) -> dict[str, float]:
    if not rows:
        return {m: 0.0 for m in METRICS}
    # fsum keeps the aggregate independent of query order
    return {m: 100.0 * math.fsum(r.metrics[m] for r in rows) / len(rows) for m in METRICS}


@dataclass
class EvalReport:
    strategy: str
    retriever: str
    config: dict
    per_query: list[QueryResult]
    wall_clock: float = 0.0

    @property
    def aggregates(self) -> dict[str, float]:
        return _percent_means(self.per_query)

    def recompute_from_table(self) -> dict[str, float]:
        """Aggregates rebuilt from the stored rankings rather than stored metric values."""
        rows = []
        for r in self.per_query:
            m = score_ranking(r.ranked_doc_ids, r.answer_ids)
            m["mrr"] = 0.0 if r.first_answer_rank is None else 1.0 / r.first_answer_rank
            rows.append(QueryResult(r.query_id, r.query, r.answer_ids, r.ranked_doc_ids, r.first_answer_rank, m))
        return _percent_means(rows)

    def latency_summary(self) -> dict[str, dict[str, float]]:
        stages: dict[str, list[float]] = {}
        for r in self.per_query:
            for name, dt in r.stage_latencies.items():
                stages.setdefault(name, []).append(dt)
            stages.setdefault("expansion", []).append(r.expansion_latency)
            stages.setdefault("total", []).append(r.total_latency)
        return {name: {"mean": statistics.fmean(v), "median": statistics.median(v)} for name, v in sorted(stages.items())}

    def to_json(self) -> dict:
        """Deterministic content only; timings live in :meth:`timing_json`."""
        return {
            "strategy": self.strategy,
            "retriever": self.retriever,
            "config": self.config,
            "metrics": self.aggregates,
            "num_queries": len(self.per_query),
            "per_query": [r.to_json() for r in self.per_query],
        }

    def timing_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "wall_clock": self.wall_clock,
            "stages": self.latency_summary(),
            "per_query": {r.query_id: {"stages": r.stage_latencies, "expansion": r.expansion_latency,
                                       "total": r.total_latency} for r in self.per_query},
        }

    def write(self, out_dir: str | Path, stem: str | None = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"report_{self.strategy}_{self.retriever}"
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out_dir / f"{stem}.timing.json").write_text(json.dumps(self.timing_json(), indent=2) + "\n", encoding="utf-8")
        (out_dir / f"{stem}.txt").write_text(render_table([self]) + "\n", encoding="utf-8")
        return path


def _evaluate_one(pipeline: Pipeline, entry: QueryEntry, strategy: str, on_error: str,
                  trace_dir: Path | None) -> QueryResult:
    trace = Trace()
    t0 = time.perf_counter()
    error = None
    combined = entry.query
    try:
        eq = pipeline.expand(strategy, entry.query, trace)
        combined = eq.combined
    except ExpansionError as exc:
        if on_error == "abort":
            raise
        logger.warning("query %s: %s", entry.query_id, exc)
        error = str(exc)
    t_exp = time.perf_counter() - t0
    ranked: list[str] = []
    if error is None:
        with trace.stage("final_retrieval"):
            ranked = [d for d, _ in pipeline.retriever.search(combined, pipeline.config.depth)]
    total = time.perf_counter() - t0
    rank = first_answer_rank(ranked, entry.answer_ids)
    metrics = score_ranking(ranked, entry.answer_ids)
    if trace_dir is not None:
        trace.data.update(query_id=entry.query_id, query=entry.query, error=error, ranked_doc_ids=ranked[:RANK_CUTOFF])
        (trace_dir / f"{entry.query_id}.json").write_text(
            json.dumps(trace.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return QueryResult(
        query_id=entry.query_id, query=entry.query, answer_ids=entry.answer_ids,
        ranked_doc_ids=tuple(ranked[:RANK_CUTOFF]), first_answer_rank=rank, metrics=metrics,
        combined_query=combined, error=error, stage_latencies=dict(trace.latency),
        expansion_latency=t_exp, total_latency=total,
    )


def run_eval(pipeline: Pipeline, queries: Sequence[QueryEntry], strategy: str, *, workers: int = 1,
             on_error: str = "skip", trace_dir: str | Path | None = None) -> EvalReport:
    """Expand, retrieve and score every query; failed expansions count as misses unless ``on_error='abort'``."""
    if on_error not in ("skip", "abort"):
        raise ValueError("on_error must be 'skip' or 'abort'")
    tdir = None
    if trace_dir is not None:
        tdir = Path(trace_dir) / strategy
        tdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda e: _evaluate_one(pipeline, e, strategy, on_error, tdir), queries))
    else:
        rows = [_evaluate_one(pipeline, e, strategy, on_error, tdir) for e in queries]
    rows.sort(key=lambda r: r.query_id)
    return EvalReport(strategy, pipeline.config.retriever, pipeline.config.to_json(), rows,
                      wall_clock=time.perf_counter() - t0)


def sweep(pipeline: Pipeline, queries: Sequence[QueryEntry], strategy: str, param: str,
          values: Sequence[int], **kwargs) -> list[EvalReport]:
    """One evaluation per value of ``param`` (``k`` or ``n``), everything else fixed."""
    if param not in ("k", "n"):
        raise ValueError("sweep parameter must be 'k' or 'n'")
    reports = []
    for v in values:
        p = pipeline.with_config(pipeline.config.replace(**{param: v}))
        reports.append(run_eval(p, queries, strategy, **kwargs))
    return reports


def compare(pipeline: Pipeline, queries: Sequence[QueryEntry], strategies: Sequence[str], **kwargs) -> list[EvalReport]:
    return [run_eval(pipeline, queries, s, **kwargs) for s in strategies]


def render_table(reports: Sequence[EvalReport], label: str = "strategy", labels: Sequence[str] | None = None) -> str:
    labels = list(labels) if labels is not None else [r.strategy for r in reports]
    width = max([len(label)] + [len(x) for x in labels])
    head = f"{label:<{width}}  " + "  ".join(f"{m:>9}" for m in METRICS)
    lines = [head, "-" * len(head)]
    for lab, r in zip(labels, reports):
        agg = r.aggregates
        lines.append(f"{lab:<{width}}  " + "  ".join(f"{agg[m]:>9.2f}" for m in METRICS))
    return "\n".join(lines)
