"""Exact inner-product retrieval and the MRR / Recall / nDCG metric suite.

The index is a dense matrix with one embedding row per passage; search is a
full scan with a bounded-size heap selection.  Score ties break by ascending
passage id everywhere, which makes every run (and hence every metric) a pure
function of the embeddings.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from pathlib import Path

import numpy as np

RetrievalRun = dict[str, list[tuple[str, float]]]

INDEX_MAGIC = b"CTIDX1"


class PassageIndex:
    def __init__(self, ids: list[str], matrix: np.ndarray):
        if len(ids) != matrix.shape[0]:
            raise ValueError(f"{len(ids)} ids for {matrix.shape[0]} matrix rows")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate passage id in index")
        self.ids = list(ids)
        self.matrix = matrix

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(passages: dict[str, str], encoder) -> PassageIndex:
    """Embed every passage in corpus order; ``encoder`` provides .embed_batch."""
    if not passages:
        raise ValueError("empty passage collection")
    ids = list(passages)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate passage id")
    matrix = encoder.embed_batch([passages[pid] for pid in ids])
    return PassageIndex(ids, matrix)


def save_index(index: PassageIndex, path: str | Path) -> Path:
    path = Path(path)
    header = json.dumps(
        {"ids": index.ids, "dim": index.dim, "dtype": index.matrix.dtype.name},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(index.matrix).tobytes())
    return path


def load_index(path: str | Path) -> PassageIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise ValueError(f"bad magic in index file {path}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        matrix = np.frombuffer(fh.read(), dtype=np.dtype(header["dtype"]))
    return PassageIndex(header["ids"], matrix.reshape(len(header["ids"]), header["dim"]).copy())


def search(index: PassageIndex, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product; k beyond corpus size returns the full ranking."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if query_vec.shape != (index.dim,):
        raise ValueError(f"query dim {query_vec.shape} != index dim {index.dim}")
    scores = index.matrix @ query_vec
    top = heapq.nsmallest(min(k, len(index.ids)), range(len(index.ids)),
                          key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in top]


def run_queries(index: PassageIndex, queries: dict[str, str], encoder, k: int) -> RetrievalRun:
    vectors = encoder.embed_batch(list(queries.values()))
    return {qid: search(index, vectors[i], k) for i, qid in enumerate(queries)}


# --------------------------------------------------------------------------
# Metrics

Qrels = dict[str, set[str]]


def _relevant(qrels: Qrels, qid: str) -> set[str]:
    if qid not in qrels:
        raise KeyError(f"query {qid!r} missing from qrels")
    return qrels[qid]


def mrr_at_k(run: RetrievalRun, qrels: Qrels, k: int) -> float:
    """Mean reciprocal rank of the first relevant passage within the top k."""
    total = 0.0
    for qid, ranking in run.items():
        relevant = _relevant(qrels, qid)
        for rank, (pid, _) in enumerate(ranking[:k], start=1):
            if pid in relevant:
                total += 1.0 / rank
                break
    return total / len(run)


def recall_at_k(run: RetrievalRun, qrels: Qrels, k: int) -> float:
    total = 0.0
    for qid, ranking in run.items():
        relevant = _relevant(qrels, qid)
        retrieved = {pid for pid, _ in ranking[:k]}
        total += len(retrieved & relevant) / len(relevant)
    return total / len(run)


def ndcg_at_k(run: RetrievalRun, qrels: Qrels, k: int) -> float:
    """Binary-gain nDCG with the 1/log2(rank+1) discount."""
    total = 0.0
    n = 0
    for qid, ranking in run.items():
        relevant = _relevant(qrels, qid)
        if not relevant:
            continue
        dcg = sum(
            1.0 / math.log2(rank + 1)
            for rank, (pid, _) in enumerate(ranking[:k], start=1)
            if pid in relevant
        )
        ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
        total += dcg / ideal
        n += 1
    return total / n if n else 0.0


METRIC_FNS = {"mrr": mrr_at_k, "recall": recall_at_k, "ndcg": ndcg_at_k}


def compute_metric(spec: str, run: RetrievalRun, qrels: Qrels) -> float:
    """Evaluate a metric spec like ``mrr@10`` or ``recall@50``."""
    name, _, depth = spec.partition("@")
    if name not in METRIC_FNS or not depth.isdigit():
        raise ValueError(f"unknown metric {spec!r} (expected e.g. mrr@10)")
    return METRIC_FNS[name](run, qrels, int(depth))


# --------------------------------------------------------------------------
# TREC run files


def write_run(run: RetrievalRun, path: str | Path, tag: str = "cotmae") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranking in run.items():
            for rank, (pid, score) in enumerate(ranking, start=1):
                fh.write(f"{qid} Q0 {pid} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> RetrievalRun:
    run: RetrievalRun = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            qid, _, pid, _, score, _ = line.split()
            run.setdefault(qid, []).append((pid, float(score)))
    return run
