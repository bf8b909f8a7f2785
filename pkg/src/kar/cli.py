"""Command-line interface: ``kar ingest|index|expand|eval|sweep|compare``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ._http import TransportError
from .corpus import IngestError, KnowledgeBase, ingest, load_queries
from .embedding import EmbedderBackend, EmbeddingCache, EmbeddingError, HashingEmbedder, OpenAIEmbedder, build_index
from .evaluation import compare, render_table, run_eval, sweep
from .expansion import STRATEGIES, ExpansionError, Pipeline, PipelineConfig, Trace
from .llm import LlmBackend, LlmError, MockLLM, OpenAIChat, PromptError
from .sparse import build_bm25

logger = logging.getLogger("kar")

DEFAULTS = {"n": 3, "h": 2, "k": 10, "retriever": "dense", "backend_llm": "mock", "backend_embed": "hash",
            "seed": 0, "workers": 1}
ENV_VARS = {"n": "KAR_N", "h": "KAR_H", "k": "KAR_K", "retriever": "KAR_RETRIEVER", "seed": "KAR_SEED",
            "backend_llm": "KAR_BACKEND_LLM", "backend_embed": "KAR_BACKEND_EMBED"}
INT_KEYS = ("n", "h", "k", "seed", "workers")
PATH_KEYS = ("docs", "edges", "structure", "queries", "out", "cache")
SECRET_HINTS = ("key", "token", "secret", "password")


class CliError(Exception):
    pass


@dataclass
class RunManifest:
    """Everything needed to reproduce a run; relative paths resolve against the manifest's folder."""

    docs: Path | None = None
    edges: Path | None = None
    structure: Path | None = None
    queries: Path | None = None
    strategies: list[str] | None = None
    retriever: str = "dense"
    out: Path | None = None
    seed: int = 0
    n: int = 3
    h: int = 2
    k: int = 10
    backend_llm: str = "mock"
    backend_embed: str = "hash"
    workers: int = 1
    cache: Path | None = None

    def config(self) -> PipelineConfig:
        return PipelineConfig(n=self.n, h=self.h, k=self.k, retriever=self.retriever,
                              embed_backend=self.backend_embed, llm_backend=self.backend_llm)

    def to_json(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = str(value) if isinstance(value, Path) else value
        return out


def _read_manifest(path: Path) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"manifest {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CliError(f"manifest {path} must hold a JSON object")
    leaked = [k for k in data if any(s in k.lower() for s in SECRET_HINTS)]
    if leaked:
        raise CliError(f"manifest {path} must not contain secrets ({', '.join(leaked)}); use the environment")
    # an optional "config" entry names a JSON file (or holds an object) with n/h/k/retriever
    config = data.pop("config", None)
    if isinstance(config, str):
        config = json.loads((path.parent / config).read_text(encoding="utf-8"))
    if config:
        data = {**config, **data}
    base = path.parent
    for key in PATH_KEYS:
        if data.get(key) is not None:
            data[key] = base / data[key]
    if "strategy" in data and "strategies" not in data:
        data["strategies"] = [data.pop("strategy")]
    return data


def resolve_manifest(args: argparse.Namespace, environ: dict | None = None) -> RunManifest:
    """Merge settings with precedence flags > manifest > environment > defaults."""
    environ = os.environ if environ is None else environ
    merged: dict = dict(DEFAULTS)
    for key, var in ENV_VARS.items():
        if environ.get(var):
            merged[key] = environ[var]
    if getattr(args, "manifest", None):
        merged.update(_read_manifest(Path(args.manifest)))
    for key in ("n", "h", "k", "retriever", "backend_llm", "backend_embed", "seed", "workers", *PATH_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = Path(value) if key in PATH_KEYS else value
    if getattr(args, "strategy", None):
        merged["strategies"] = list(args.strategy)
    for key in INT_KEYS:
        try:
            merged[key] = int(merged[key])
        except (TypeError, ValueError):
            raise CliError(f"{key} must be an integer, got {merged[key]!r}") from None
    unknown = set(merged) - set(RunManifest.__dataclass_fields__)
    if unknown:
        raise CliError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
    m = RunManifest(**merged)
    bad = [s for s in m.strategies or () if s not in STRATEGIES]
    if bad:
        raise CliError(f"unknown strategy {bad[0]!r}; expected one of {', '.join(STRATEGIES)}")
    return m


def make_embedder(spec: str, seed: int) -> EmbedderBackend:
    """``hash``, ``hash:<dim>`` or ``openai`` (endpoint and key from the environment)."""
    name, _, arg = spec.partition(":")
    if name == "hash":
        return HashingEmbedder(dim=int(arg) if arg else 64, seed=seed)
    if name == "openai":
        return OpenAIEmbedder.from_env()
    raise CliError(f"unknown embedding backend {spec!r}; expected hash, hash:<dim> or openai")


def make_llm(spec: str, seed: int) -> LlmBackend:
    if spec == "mock":
        return MockLLM(seed=seed)
    if spec == "openai":
        return OpenAIChat.from_env()
    raise CliError(f"unknown LLM backend {spec!r}; expected mock or openai")


def _require(m: RunManifest, *keys: str) -> None:
    missing = [k for k in keys if getattr(m, k) is None]
    if missing:
        raise CliError(f"missing required setting(s): {', '.join('--' + k for k in missing)}")


def _load_kb(m: RunManifest) -> KnowledgeBase:
    _require(m, "docs", "edges", "structure")
    return ingest(m.docs, m.edges, m.structure)


def _cache(m: RunManifest) -> EmbeddingCache | None:
    if m.cache is None:
        return None
    if not m.cache.exists():
        raise CliError(f"missing index: {m.cache} (run 'kar index' first)")
    return EmbeddingCache(m.cache)


def _pipeline(m: RunManifest, kb: KnowledgeBase) -> Pipeline:
    return Pipeline(kb, make_embedder(m.backend_embed, m.seed), make_llm(m.backend_llm, m.seed),
                    m.config(), cache=_cache(m))


def _out_dir(m: RunManifest) -> Path:
    out = m.out or Path("kar-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    m = resolve_manifest(args)
    report = _load_kb(m).report()
    print(json.dumps(report.to_json(), indent=2))
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    m = resolve_manifest(args)
    kb = _load_kb(m)
    out = _out_dir(m)
    cache_path = m.cache or out / "embeddings.jsonl"
    embedder = make_embedder(m.backend_embed, m.seed)
    index = build_index(kb, embedder, cache=EmbeddingCache(cache_path), max_in_flight=max(1, m.workers))
    bm25 = build_bm25(kb)
    summary = {
        "documents": len(index),
        "embedding_backend": embedder.name,
        "dim": index.dim,
        "embedding_cache": str(cache_path),
        "bm25_terms": len(bm25.terms),
        "bm25_avg_doc_length": bm25.avg_doc_length,
    }
    (out / "index.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_expand(args: argparse.Namespace) -> int:
    m = resolve_manifest(args)
    strategies = m.strategies or ["kar"]
    if len(strategies) != 1:
        raise CliError("expand takes exactly one --strategy")
    strategy = strategies[0]
    kb = _load_kb(m)
    trace = Trace()
    eq = _pipeline(m, kb).expand(strategy, args.query, trace)
    print(eq.combined)
    if m.out is not None:
        out = _out_dir(m)
        path = out / f"trace_{strategy}.json"
        trace.data["expanded"] = eq.to_json()
        path.write_text(json.dumps(trace.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        print(f"trace: {path}", file=sys.stderr)
    return 0


def _queries(m: RunManifest, kb: KnowledgeBase):
    _require(m, "queries")
    return load_queries(m.queries, kb)


def cmd_eval(args: argparse.Namespace) -> int:
    m = resolve_manifest(args)
    kb = _load_kb(m)
    queries = _queries(m, kb)
    pipeline = _pipeline(m, kb)
    out = _out_dir(m)
    reports = []
    for strategy in m.strategies or STRATEGIES:
        report = run_eval(pipeline, queries, strategy, workers=m.workers,
                          on_error=args.on_error, trace_dir=out / "traces")
        report.write(out)
        reports.append(report)
    (out / "manifest.resolved.json").write_text(json.dumps(m.to_json(), indent=2) + "\n", encoding="utf-8")
    print(render_table(reports))
    return 0


def _parse_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--values must be comma-separated integers, got {text!r}") from None
    if not values:
        raise CliError("--values is empty")
    return values


def cmd_sweep(args: argparse.Namespace) -> int:
    m = resolve_manifest(args)
    values = _parse_values(args.values)
    kb = _load_kb(m)
    queries = _queries(m, kb)
    pipeline = _pipeline(m, kb)
    out = _out_dir(m)
    blocks = []
    for strategy in m.strategies or ["kar"]:
        reports = sweep(pipeline, queries, strategy, args.param, values, workers=m.workers, on_error=args.on_error)
        for v, r in zip(values, reports):
            r.write(out, f"sweep_{strategy}_{args.param}{v}")
        blocks.append(f"[{strategy}]\n" + render_table(reports, args.param, [str(v) for v in values]))
    table = "\n\n".join(blocks)
    (out / f"sweep_{args.param}.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    m = resolve_manifest(args)
    kb = _load_kb(m)
    queries = _queries(m, kb)
    reports = compare(_pipeline(m, kb), queries, m.strategies or STRATEGIES, workers=m.workers, on_error=args.on_error)
    out = _out_dir(m)
    for r in reports:
        r.write(out, f"compare_{r.strategy}")
    table = render_table(reports)
    (out / "compare.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("data and configuration")
    g.add_argument("--manifest", help="JSON run manifest; flags override its values")
    g.add_argument("--docs", help="documents JSONL")
    g.add_argument("--edges", help="relation edges JSONL")
    g.add_argument("--structure", help="document structure JSON")
    g.add_argument("--queries", help="query set JSONL")
    g.add_argument("--strategy", action="append", choices=STRATEGIES,
                   help="expansion strategy (repeatable for eval/sweep/compare)")
    g.add_argument("--retriever", choices=("dense", "bm25"))
    g.add_argument("--n", type=int, help="samples / feedback documents (default 3)")
    g.add_argument("--h", type=int, help="neighbor hops (default 2)")
    g.add_argument("--k", type=int, help="neighbors kept per entity (default 10)")
    g.add_argument("--backend-llm", dest="backend_llm", help="mock | openai")
    g.add_argument("--backend-embed", dest="backend_embed", help="hash | hash:<dim> | openai")
    g.add_argument("--cache", help="embedding cache written by 'kar index'")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kar", description="Knowledge-aware query expansion for semi-structured retrieval.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="validate a corpus and print its statistics")
    p.set_defaults(func=cmd_ingest)
    p = sub.add_parser("index", parents=[common], help="embed the corpus into a cache and build BM25 statistics")
    p.set_defaults(func=cmd_index)
    p = sub.add_parser("expand", parents=[common], help="expand one query and print the combined text")
    p.add_argument("query")
    p.set_defaults(func=cmd_expand)
    for name, func, helptext in (("eval", cmd_eval, "evaluate strategies on a query set"),
                                 ("sweep", cmd_sweep, "evaluate over a range of k or n"),
                                 ("compare", cmd_compare, "side-by-side table over strategies")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--on-error", dest="on_error", choices=("skip", "abort"), default="skip")
        if name == "sweep":
            p.add_argument("--param", choices=("k", "n"), required=True)
            p.add_argument("--values", required=True, help="comma-separated integers, e.g. 3,5,10,20,40")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, IngestError, PromptError, ExpansionError, EmbeddingError, LlmError,
            TransportError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"kar: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
