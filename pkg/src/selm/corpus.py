"""Message-domain generators: contiguous text passages, random word
sequences, and uniform random bytes, all truncated to a token budget.

With the byte-level tokenizer a token is a byte, so token limits are byte
limits.  A small bundled prose corpus backs the text domain in tests; real
corpora are user-supplied files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from random import Random

DOMAINS = ("text_file", "random_words", "random_bytes")


class InputError(ValueError):
    """Empty or too-short corpus/wordlist input."""


@dataclass(frozen=True)
class MessageSpec:
    domain: str
    token_limit: int
    seed: int
    source_path: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.token_limit < 1:
            raise ValueError("token_limit must be >= 1")
        if self.domain == "random_bytes" and self.source_path is not None:
            raise ValueError("random_bytes takes no source_path")


def bundled_corpus() -> bytes:
    """The small prose corpus shipped for tests and demos."""
    return resources.files("selm.data").joinpath("sample_corpus.txt").read_bytes()


def build_wordlist(text: bytes) -> list:
    """Unique words of a text, split on whitespace/punctuation, in first
    occurrence order."""
    words = re.findall(rb"[A-Za-z']+", text)
    return list(dict.fromkeys(words))


def _read_source(spec: MessageSpec) -> bytes:
    if spec.source_path is None:
        return bundled_corpus()
    with open(spec.source_path, "rb") as fh:
        return fh.read()


def _load_wordlist(spec: MessageSpec) -> list:
    """random_words source is a newline-separated wordlist file; without
    one, the list is derived from the bundled corpus."""
    if spec.source_path is None:
        return build_wordlist(bundled_corpus())
    with open(spec.source_path, "rb") as fh:
        return [w for w in fh.read().splitlines() if w]


def sample_message(spec: MessageSpec) -> bytes:
    """Draw one message for the spec; a pure function of (spec, seed).

    text_file: a contiguous passage starting at a random offset.
    random_words: uniform wordlist draws joined by spaces.
    random_bytes: exactly token_limit uniform bytes.
    All outputs are truncated to exactly token_limit tokens.
    """
    rng = Random(spec.seed)
    if spec.domain == "random_bytes":
        return rng.randbytes(spec.token_limit)
    if spec.domain == "text_file":
        text = _read_source(spec)
        if len(text) < spec.token_limit:
            raise InputError(
                f"corpus has {len(text)} bytes, need >= {spec.token_limit}"
            )
        start = rng.randrange(0, len(text) - spec.token_limit + 1)
        return text[start : start + spec.token_limit]
    words = _load_wordlist(spec)
    if not words:
        raise InputError("wordlist is empty")
    pieces = []
    total = 0
    while total < spec.token_limit:
        w = words[rng.randrange(len(words))]
        pieces.append(w)
        total += len(w) + (1 if total else 0)
    return b" ".join(pieces)[: spec.token_limit]
