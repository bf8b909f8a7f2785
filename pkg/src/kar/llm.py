"""Prompt templates and text-generation backends."""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Protocol, Sequence, Union

from ._http import TransportError, post_json
from .text import content_tokens

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).parent / "prompts"

TEMPLATE_IDS = (
    "hyde", "rar",
    "agr_extract", "agr_analyze", "agr_generate1", "agr_generate2", "agr_refine",
    "kar_parse", "kar_generate",
)

# bindings that are never truncated
SKELETON_KEYS = frozenset({"query", "doc_struct"})

# separates the relation part of a serialized document triple from its target
TRIPLE_ARROW = "]--> "

_PLACEHOLDER = re.compile(r"\{([a-z][a-z0-9_]*)\}")

Binding = Union[str, Sequence[str]]


class PromptError(ValueError):
    pass


class LlmError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER.findall(self.body)))


@lru_cache(maxsize=None)
def load_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise PromptError(f"unknown template_id {template_id!r}")
    return PromptTemplate(template_id, (PROMPTS_DIR / f"{template_id}.txt").read_text(encoding="utf-8"))


def _as_text(value: Binding) -> str:
    return value if isinstance(value, str) else "\n".join(value)


def render(template: PromptTemplate | str, bindings: Mapping[str, Binding]) -> str:
    """Substitute every placeholder in one pass; list bindings are joined one per line."""
    if isinstance(template, str):
        template = load_template(template)
    missing = [p for p in template.placeholders if p not in bindings]
    if missing:
        raise PromptError(f"template {template.template_id!r} is missing bindings: {', '.join(missing)}")
    return _PLACEHOLDER.sub(lambda m: _as_text(bindings[m.group(1)]), template.body)


def fit_prompt(template: PromptTemplate | str, bindings: Mapping[str, Binding], budget: int) -> tuple[str, dict]:
    """Render within ``budget`` characters by cutting context blocks from their tails.

    Each context block (a PRF doc, a triple, ...) gives up characters in
    proportion to its length. The template text, the document structure and
    the query are kept; the query is cut only if every context block is
    already empty. Returns the prompt and the bindings actually used.
    """
    if isinstance(template, str):
        template = load_template(template)
    prompt = render(template, bindings)
    excess = len(prompt) - budget
    if excess <= 0:
        return prompt, dict(bindings)

    fitted: dict[str, Binding] = dict(bindings)
    blocks = [(key, i, text) for key, value in bindings.items() if key not in SKELETON_KEYS
              for i, text in enumerate([value] if isinstance(value, str) else value)]
    total = sum(len(t) for _, _, t in blocks)
    cut_lists: dict[str, list[str]] = {k: ([v] if isinstance(v, str) else list(v))
                                       for k, v in bindings.items() if k not in SKELETON_KEYS}
    if total >= excess:
        for key, i, text in blocks:
            cut = math.ceil(excess * len(text) / total)
            cut_lists[key][i] = text[: max(0, len(text) - cut)]
    else:
        for key, i, _ in blocks:
            cut_lists[key][i] = ""
        remaining = excess - total
        query = _as_text(bindings.get("query", ""))
        if remaining > len(query):
            raise PromptError(f"prompt skeleton alone exceeds the {budget}-character budget")
        fitted["query"] = query[: len(query) - remaining]
    for key, parts in cut_lists.items():
        fitted[key] = parts[0] if isinstance(bindings[key], str) else parts
    prompt = render(template, fitted)
    logger.debug("truncated %s prompt by %d chars to fit %d", template.template_id, excess, budget)
    return prompt, fitted


@dataclass(frozen=True)
class GenRequest:
    prompt: str
    n_samples: int = 1
    max_tokens: int = 512
    temperature: float = 1.0
    # metadata for offline backends; remote backends ignore it
    template_id: str | None = None
    bindings: Mapping[str, Binding] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class LlmBackend(Protocol):
    name: str
    context_window: int

    def complete(self, req: GenRequest) -> list[str]: ...


def generate(backend: LlmBackend, req: GenRequest) -> list[str]:
    """Exactly ``req.n_samples`` completions from one inference."""
    if not req.prompt:
        raise ValueError("empty prompt")
    if len(req.prompt) > backend.context_window:
        raise ValueError(
            f"prompt of {len(req.prompt)} chars exceeds the {backend.context_window}-char context window"
        )
    out = backend.complete(req)
    if len(out) != req.n_samples:
        raise LlmError(f"{backend.name} returned {len(out)} completions, expected {req.n_samples}")
    for i, text in enumerate(out):
        if not text:
            logger.warning("%s returned an empty completion (sample %d)", backend.name, i)
    return out


def prompt_and_generate(backend: LlmBackend, template_id: str, bindings: Mapping[str, Binding],
                        n_samples: int = 1, **kwargs) -> tuple[str, list[str]]:
    prompt, fitted = fit_prompt(template_id, bindings, backend.context_window)
    req = GenRequest(prompt, n_samples, template_id=template_id, bindings=fitted, **kwargs)
    return prompt, generate(backend, req)


# ---------------------------------------------------------------------------
# offline backend
# ---------------------------------------------------------------------------

_SPAN = re.compile(r"\b[A-Z][\w'&-]*(?:\s+[A-Z][\w'&-]*)+")
_SENTENCE = re.compile(r"(?<=[.!?])\s+")


def capitalized_spans(query: str) -> list[str]:
    """Runs of two or more consecutive capitalized words, in order, deduplicated."""
    return list(dict.fromkeys(m.group(0) for m in _SPAN.finditer(query)))


def _stable_int(*parts: object) -> int:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class MockLLM:
    """Deterministic stand-in for a chat model, driven by request metadata.

    * ``kar_parse``: one ``{entity: {name: ...}}`` block per capitalized
      multi-word span of the query.
    * ``hyde`` / ``agr_extract``: the query's content keywords.
    * other templates: the context is cut into units (sentences of bound
      documents, whole lines for document triples), each scored by how many
      distinct query keywords it contains; the best ``units_per_sample``
      units are concatenated. For a triple the whole line is the evidence
      but only the target document is written out, the way an answer would
      describe the related entity rather than restate the source.

    Sample ``i`` breaks score ties with a hash of (prompt, seed, i).
    """

    def __init__(self, seed: int = 0, context_window: int = 100_000, delay: float = 0.0,
                 units_per_sample: int = 2) -> None:
        self.seed = seed
        self.context_window = context_window
        self.delay = delay
        self.units_per_sample = units_per_sample
        self.name = f"mock-s{seed}"
        self._lock = threading.Lock()
        self.calls = 0
        self.log: list[str | None] = []

    def reset(self) -> None:
        with self._lock:
            self.calls = 0
            self.log.clear()

    def complete(self, req: GenRequest) -> list[str]:
        with self._lock:
            self.calls += 1
            self.log.append(req.template_id)
        if self.delay:
            time.sleep(self.delay)
        query = _as_text(req.bindings.get("query", req.prompt))
        if req.template_id == "kar_parse":
            out = "\n".join(f"{{entity: {{name: {s}}}}}" for s in capitalized_spans(query))
            return [out] * req.n_samples
        keywords = content_tokens(query)
        if req.template_id in (None, "hyde", "agr_extract"):
            return [" ".join(keywords[i % len(keywords):] + keywords[: i % len(keywords)]) if keywords else query
                    for i in range(req.n_samples)]
        units = self._units(req.bindings)
        wanted = set(keywords)
        scored = [(len(wanted.intersection(content_tokens(evidence))), j, text)
                  for j, (evidence, text) in enumerate(units)]
        prompt_key = hashlib.sha256(req.prompt.encode("utf-8")).hexdigest()
        samples = []
        for i in range(req.n_samples):
            ranked = sorted(scored, key=lambda u: (-u[0], _stable_int(prompt_key, self.seed, i, u[1])))
            chosen = [text for score, _, text in ranked[: self.units_per_sample] if score > 0]
            if not chosen and ranked:
                chosen = [ranked[0][2]]
            samples.append(" ".join(chosen))
        return samples

    @staticmethod
    def _units(bindings: Mapping[str, Binding]) -> list[tuple[str, str]]:
        units = []
        for key, value in bindings.items():
            if key in SKELETON_KEYS:
                continue
            for block in ([value] if isinstance(value, str) else value):
                for line in block.splitlines():
                    line = line.strip()
                    if not line:
                        continue
                    if TRIPLE_ARROW in line:
                        units.append((line, line.rsplit(TRIPLE_ARROW, 1)[1]))
                    else:
                        units.extend((s, s) for s in _SENTENCE.split(line) if s)
        return units


# ---------------------------------------------------------------------------
# remote backend
# ---------------------------------------------------------------------------


class OpenAIChat:
    """OpenAI-compatible ``/chat/completions`` client; ``n`` samples per request."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None, *,
                 context_window: int = 400_000, timeout: float = 120.0,
                 attempts: int = 3, backoff: float = 1.0) -> None:
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = api_key
        self.context_window = context_window
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.name = f"openai:{model}"

    @classmethod
    def from_env(cls, **kwargs) -> "OpenAIChat":
        return cls(
            base_url=os.environ.get("KAR_LLM_URL", "https://api.openai.com/v1"),
            model=os.environ.get("KAR_LLM_MODEL", "gpt-4o"),
            api_key=os.environ.get("KAR_API_KEY") or os.environ.get("OPENAI_API_KEY"),
            **kwargs,
        )

    def complete(self, req: GenRequest) -> list[str]:
        body = post_json(
            self.url,
            {
                "model": self.model,
                "messages": [{"role": "user", "content": req.prompt}],
                "n": req.n_samples,
                "temperature": req.temperature,
                "max_tokens": req.max_tokens,
            },
            api_key=self.api_key, timeout=self.timeout, attempts=self.attempts, backoff=self.backoff,
        )
        try:
            choices = sorted(body["choices"], key=lambda c: c.get("index", 0))
            return [(c.get("message") or {}).get("content") or "" for c in choices]
        except (KeyError, TypeError, AttributeError) as exc:
            raise LlmError(f"unexpected chat response shape from {self.url}") from exc


__all__ = [
    "GenRequest", "LlmBackend", "LlmError", "MockLLM", "OpenAIChat", "PromptError", "PromptTemplate",
    "TEMPLATE_IDS", "TRIPLE_ARROW", "TransportError", "capitalized_spans", "fit_prompt", "generate",
    "load_template", "prompt_and_generate", "render",
]
