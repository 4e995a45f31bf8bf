"""Deterministic word-level text <-> token-id mapping.

A whitespace/punctuation tokenizer with a frequency-trained vocabulary and
the five fixed special tokens.  Unknown words map to [UNK]; every encoded
sequence starts with [CLS].  The surface leaves room for a subword
implementation later, but word-level keeps the arithmetic auditable.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

# A token is a run of word characters or a single punctuation mark.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

TokenSequence = list[int]


def words(text: str) -> list[str]:
    """Lowercased, NFC-normalized word/punctuation tokens."""
    return _TOKEN_RE.findall(unicodedata.normalize("NFC", text).lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    _ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:5] != SPECIALS:
            raise ValueError("first five vocabulary entries must be the special tokens")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if idx < 0 or idx >= len(self.tokens):
            raise IndexError(f"token id {idx} out of range (vocab size {len(self.tokens)})")
        return self.tokens[idx]


def train_vocab(texts: Iterable[str], target_size: int) -> Vocabulary:
    """Specials plus the most frequent words, ties broken lexicographically.

    ``target_size`` of 5 yields a specials-only vocabulary where every word
    encodes to [UNK].
    """
    if target_size < len(SPECIALS):
        raise ValueError(f"target_size must be >= {len(SPECIALS)}")
    counts: Counter[str] = Counter()
    seen_any = False
    for text in texts:
        seen_any = True
        counts.update(words(text))
    if not seen_any:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    chosen = [tok for tok, _ in ranked[: target_size - len(SPECIALS)]]
    return Vocabulary(SPECIALS + chosen)


def encode(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """[CLS] followed by word ids, truncated to ``max_len``.  Never padded."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [CLS_ID]
    for w in words(text):
        if len(ids) == max_len:
            break
        ids.append(vocab.id(w))
    return ids


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.token(i) for i in ids)


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocabulary(tokens)
