"""Okapi BM25 over an inverted index, the lexical first-stage retriever.

Scores use idf = ln(1 + (N - df + 0.5) / (df + 0.5)) and term weight
tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl)) with k1 = 0.9 and
b = 0.4.  Repeated query terms contribute once per occurrence.  Rankings
break score ties by ascending passage id, so results are independent of
insertion order.
"""

from __future__ import annotations

import heapq
import math
from collections import Counter

from .tokenizer import words


class Bm25Index:
    def __init__(self, passages: dict[str, str], k1: float = 0.9, b: float = 0.4):
        if not passages:
            raise ValueError("empty passage collection")
        self.k1 = k1
        self.b = b
        self.ids = sorted(passages)
        self.doc_len: dict[str, int] = {}
        self.postings: dict[str, dict[str, int]] = {}  # term -> {pid: tf}
        for pid in self.ids:
            toks = words(passages[pid])
            self.doc_len[pid] = len(toks)
            for term, tf in Counter(toks).items():
                self.postings.setdefault(term, {})[pid] = tf
        self.n_docs = len(self.ids)
        self.avgdl = sum(self.doc_len.values()) / self.n_docs
        self.idf = {
            term: math.log(1 + (self.n_docs - len(post) + 0.5) / (len(post) + 0.5))
            for term, post in self.postings.items()
        }

    def _term_weight(self, tf: int, dl: int) -> float:
        return tf * (self.k1 + 1) / (tf + self.k1 * (1 - self.b + self.b * dl / self.avgdl))

    def score(self, query_tokens: list[str], pid: str) -> float:
        """BM25 score of one passage; absent query terms contribute 0."""
        dl = self.doc_len[pid]
        total = 0.0
        for term in query_tokens:
            post = self.postings.get(term)
            if post is None:
                continue
            tf = post.get(pid, 0)
            if tf:
                total += self.idf[term] * self._term_weight(tf, dl)
        return total

    def search(self, query: str, k: int) -> list[tuple[str, float]]:
        """Top-k (passage id, score), ties broken by ascending id."""
        query_tokens = words(query)
        if not query_tokens:
            return []
        scores: dict[str, float] = {}
        for term in query_tokens:
            post = self.postings.get(term)
            if post is None:
                continue
            idf = self.idf[term]
            for pid, tf in post.items():
                scores[pid] = scores.get(pid, 0.0) + idf * self._term_weight(tf, self.doc_len[pid])
        top = heapq.nsmallest(k, scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(pid, s) for pid, s in top]
