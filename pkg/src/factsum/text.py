"""Shared tokenizer. Corpus ingestion, metrics, and the model vocabulary all
use this one tokenization so entity matching never skews between stages."""
from __future__ import annotations

import string

_EDGE_CHARS = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, and strip punctuation from token edges.

    Tokens that are pure punctuation are dropped.
    """
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_EDGE_CHARS)
        if tok:
            tokens.append(tok)
    return tokens


def ngrams(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    """All contiguous n-grams of `tokens`, in order; empty when len < n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
