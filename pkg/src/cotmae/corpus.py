"""Corpus ingestion: sentence splitting, span packing, and span-pair sampling.

Documents are split into sentences by a deterministic rule-based splitter,
sentences are greedily packed into token-budgeted spans, and each epoch draws
one span pair per document under a Near/Olap/Rand strategy mixture.  All
randomness is a pure function of (corpus, config, epoch), so the pair stream
is reproducible and safe to parallelize over documents.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .tokenizer import words

logger = logging.getLogger(__name__)

_TERMINALS = ".!?"
_ABBREVIATIONS = {"mr", "mrs", "dr", "prof", "fig", "eq", "etc", "e.g", "i.e", "vs"}
_WORD_BEFORE = re.compile(r"[\w.]+$")


class Strategy(str, Enum):
    NEAR = "near"
    OLAP = "olap"
    RAND = "rand"


class InsufficientSpans(ValueError):
    """Raised when a document cannot support the requested sampling strategy."""


@dataclass
class Document:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("document id must be non-empty")
        if not self.text.strip():
            raise ValueError(f"document {self.id!r} has empty text")


@dataclass
class Span:
    doc_id: str
    sent_begin: int
    sent_end: int
    text: str
    token_len: int  # includes the prepended [CLS]


@dataclass
class SpanPair:
    a: Span
    b: Span
    strategy: Strategy


@dataclass
class SamplerConfig:
    max_span_len: int = 128
    mixture_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # near, olap, rand
    olap_fraction: float = 0.5
    epoch_seed: int = 0

    def __post_init__(self):
        if self.max_span_len < 8:
            raise ValueError("max_span_len must be >= 8")
        if any(w < 0 for w in self.mixture_weights):
            raise ValueError("mixture weights must be non-negative")
        if abs(sum(self.mixture_weights) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if not (0.0 < self.olap_fraction < 1.0):
            raise ValueError("olap_fraction must lie in (0, 1)")


def split_sentences(text: str) -> list[str]:
    """Split on [.!?] followed by whitespace and an uppercase letter or digit.

    A fixed abbreviation stop-list (Mr, Dr, e.g, ...) suppresses false splits.
    Joining the result with single spaces reproduces the whitespace-collapsed
    input.
    """
    collapsed = " ".join(text.split())
    if not collapsed:
        raise ValueError("empty document")
    sentences: list[str] = []
    start = 0
    for i, ch in enumerate(collapsed):
        if ch not in _TERMINALS:
            continue
        if i + 2 >= len(collapsed) or collapsed[i + 1] != " ":
            continue
        nxt = collapsed[i + 2]
        if not (nxt.isupper() or nxt.isdigit()):
            continue
        if ch == ".":
            m = _WORD_BEFORE.search(collapsed, start, i)
            if m is not None and m.group().rstrip(".").lower() in _ABBREVIATIONS:
                continue
        sentences.append(collapsed[start : i + 1])
        start = i + 2
    sentences.append(collapsed[start:])
    return sentences


def sentence_token_len(sentence: str) -> int:
    return len(words(sentence))


def build_spans(sentences: list[str], max_span_len: int) -> list[Span]:
    """Greedily pack consecutive sentences into spans of <= max_span_len tokens.

    Token counts include the [CLS] that encoding will prepend.  A single
    sentence longer than the budget becomes its own span, truncated at the
    token level (its text is kept whole; encoding enforces the cap).
    """
    if not sentences:
        raise ValueError("empty document")
    lens = [sentence_token_len(s) for s in sentences]
    spans: list[Span] = []
    begin = 0
    while begin < len(sentences):
        total = 1  # [CLS]
        end = begin
        while end < len(sentences) and total + lens[end] <= max_span_len:
            total += lens[end]
            end += 1
        if end == begin:  # oversized single sentence: truncate to budget
            end = begin + 1
            total = max_span_len
        spans.append(
            Span(
                doc_id="",
                sent_begin=begin,
                sent_end=end,
                text=" ".join(sentences[begin:end]),
                token_len=total,
            )
        )
        begin = end
    return spans


def _pack_from(sentences: list[str], begin: int, max_span_len: int) -> Span:
    total = 1
    end = begin
    lens = [sentence_token_len(s) for s in sentences]
    while end < len(sentences) and total + lens[end] <= max_span_len:
        total += lens[end]
        end += 1
    if end == begin:
        end = begin + 1
        total = max_span_len
    return Span("", begin, end, " ".join(sentences[begin:end]), total)


def sample_pair(
    spans: list[Span],
    strategy: Strategy,
    rng: random.Random,
    sentences: list[str] | None = None,
    max_span_len: int = 128,
    olap_fraction: float = 0.5,
) -> SpanPair:
    """Draw a span pair under ``strategy``; (a, b) follow document order.

    Near: adjacent, disjoint.  Olap: b re-packed to start partway through a,
    so the two share at least one sentence and neither contains the other.
    Rand: two distinct (hence disjoint) spans at any positions.  Raises
    InsufficientSpans when the document cannot support the strategy.
    """
    if strategy is Strategy.NEAR:
        if len(spans) < 2:
            raise InsufficientSpans("need >= 2 spans for Near")
        i = rng.randrange(len(spans) - 1)
        return SpanPair(spans[i], spans[i + 1], Strategy.NEAR)

    if strategy is Strategy.RAND:
        if len(spans) < 2:
            raise InsufficientSpans("need >= 2 spans for Rand")
        i, j = sorted(rng.sample(range(len(spans)), 2))
        return SpanPair(spans[i], spans[j], Strategy.RAND)

    if sentences is None:
        raise ValueError("Olap sampling needs the sentence list")
    candidates = [
        i
        for i in range(len(spans) - 1)
        if spans[i].sent_end - spans[i].sent_begin >= 2
    ]
    if not candidates:
        raise InsufficientSpans("no span wide enough for Olap")
    offset = rng.randrange(len(candidates))
    for probe in range(len(candidates)):
        a = spans[candidates[(offset + probe) % len(candidates)]]
        a_len = a.sent_end - a.sent_begin
        cut = a.sent_begin + min(a_len - 1, max(1, int(olap_fraction * a_len + 0.5)))
        b = _pack_from(sentences, cut, max_span_len)
        if b.sent_end > a.sent_end:  # b must extend past a, not nest inside it
            b.doc_id = a.doc_id
            return SpanPair(a, b, Strategy.OLAP)
    raise InsufficientSpans("no valid Olap pair under the token budget")


def document_spans(doc: Document, max_span_len: int) -> tuple[list[str], list[Span]]:
    sentences = split_sentences(doc.text)
    spans = build_spans(sentences, max_span_len)
    for s in spans:
        s.doc_id = doc.id
    return sentences, spans


def _doc_rng(cfg: SamplerConfig, epoch: int, doc_id: str) -> random.Random:
    digest = hashlib.sha256(f"{cfg.epoch_seed}:{epoch}:{doc_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def _draw_strategy(rng: random.Random, weights: tuple[float, float, float]) -> Strategy:
    r = rng.random()
    acc = 0.0
    for strat, w in zip((Strategy.NEAR, Strategy.OLAP, Strategy.RAND), weights):
        acc += w
        if r < acc:
            return strat
    return Strategy.RAND


def build_pretrain_stream(
    docs: Iterable[Document], cfg: SamplerConfig, epoch: int
) -> Iterator[SpanPair]:
    """One pair per document per epoch, strategy drawn from the mixture.

    Per-document work depends only on (document, cfg, epoch), so the stream
    is deterministic and any document-parallel schedule reproduces it.
    Strategies the document cannot support fall back to Near; a single-span
    document yields a degenerate duplicated-span pair (marked Near) rather
    than being dropped, keeping the stream length stable across epochs.
    Documents yielding zero spans are skipped with a counted warning.
    """
    skipped = 0
    for doc in docs:
        try:
            sentences, spans = document_spans(doc, cfg.max_span_len)
        except ValueError:
            skipped += 1
            logger.warning("skipping document %r: no spans (%d skipped so far)", doc.id, skipped)
            continue
        if not spans:
            skipped += 1
            logger.warning("skipping document %r: no spans (%d skipped so far)", doc.id, skipped)
            continue
        rng = _doc_rng(cfg, epoch, doc.id)
        strategy = _draw_strategy(rng, cfg.mixture_weights)
        try:
            pair = sample_pair(
                spans, strategy, rng,
                sentences=sentences,
                max_span_len=cfg.max_span_len,
                olap_fraction=cfg.olap_fraction,
            )
        except InsufficientSpans:
            try:
                pair = sample_pair(spans, Strategy.NEAR, rng)
            except InsufficientSpans:
                pair = SpanPair(spans[0], spans[0], Strategy.NEAR)  # degenerate single-span doc
        yield pair


def read_corpus(path: str | Path) -> list[Document]:
    """Load a JSONL corpus of {"id": ..., "text": ...} objects."""
    docs = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            doc = Document(id=str(obj["id"]), text=obj["text"])
            if doc.id in seen:
                raise ValueError(f"duplicate document id {doc.id!r} at line {line_no}")
            seen.add(doc.id)
            docs.append(doc)
    if not docs:
        raise ValueError(f"corpus {path} is empty")
    return docs


def write_pairs(pairs: Iterable[SpanPair], path: str | Path) -> int:
    """Emit pairs as JSONL; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(
                json.dumps(
                    {
                        "doc_id": p.a.doc_id,
                        "strategy": p.strategy.value,
                        "a_text": p.a.text,
                        "b_text": p.b.text,
                        "a_sents": [p.a.sent_begin, p.a.sent_end],
                        "b_sents": [p.b.sent_begin, p.b.sent_end],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            n += 1
    return n
