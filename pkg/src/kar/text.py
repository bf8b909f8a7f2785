"""Tokenization shared by BM25, the hashing embedder and the mock LLM."""

from __future__ import annotations

import re

_TOKEN = re.compile(r"[^\W_]+")

# small closed list; used only by the offline mock backends
STOPWORDS = frozenset(
    """a an and are as at be by for from has have in is it its of on or that the this to was were
    what which who whom with find me some any all do does did i you we they their there these those
    can could would should will about into than then so such not no""".split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs; no stemming, no stopword removal."""
    return _TOKEN.findall(text.lower())


def content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS]
