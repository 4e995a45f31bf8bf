"""Dual-encoder contrastive fine-tuning with the two-stage negative pipeline.

Stage 1 trains from BM25 negatives; stage 2 re-trains from the pre-trained
checkpoint with BM25 negatives plus hard negatives mined by the stage-1
retriever.  Query/passage similarity is a plain inner product of the last
layer's [CLS] embeddings; the loss is cross-entropy of the positive against
the example's own negatives plus (by default) every other example's
candidates in the batch.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nncore as nn
from .bm25 import Bm25Index
from .evalindex import PassageIndex, Qrels, build_index, search
from .model import MaskedBatch, MaskedSpan, ModelConfig, ModelWeights, encoder_forward_batch
from .nncore import IGNORE_INDEX, Tensor
from .pretrain import (
    OptimConfig,
    TrainState,
    adamw_step,
    clip_grads,
    load_model,
    lr_at,
    read_checkpoint,
    save_checkpoint,
)
from .tokenizer import Vocabulary, encode

logger = logging.getLogger(__name__)


@dataclass
class TrainingExample:
    query_id: str
    positive: str
    negatives: list[str]

    def __post_init__(self):
        if self.positive in self.negatives:
            raise ValueError(f"positive {self.positive!r} listed among negatives")


def plain_spans(seqs: Sequence[list[int]]) -> list[MaskedSpan]:
    return [MaskedSpan(input_ids=list(s), labels=[IGNORE_INDEX] * len(s), mask_positions=[]) for s in seqs]


class TextEncoder:
    """One encoder side: text in, [CLS] embedding out."""

    def __init__(self, weights: ModelWeights, vocab: Vocabulary, cfg: ModelConfig):
        self.weights = weights
        self.vocab = vocab
        self.cfg = cfg

    def cls_batch(self, texts: Sequence[str], training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
        """[CLS] embeddings on the tape, [batch, d_model]."""
        seqs = [encode(t, self.vocab, self.cfg.max_seq_len) for t in texts]
        batch = MaskedBatch(plain_spans(seqs), self.weights.dtype)
        out = encoder_forward_batch(batch, self.weights, self.cfg,
                                    training=training, rng=rng, compute_mlm=False)
        return out.context_embedding

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        with nn.no_grad():
            return self.cls_batch(texts).numpy().copy()


def similarity(q_vec: np.ndarray, p_vec: np.ndarray) -> float:
    """Inner product; no normalization, no temperature."""
    if q_vec.shape != p_vec.shape:
        raise ValueError(f"dimension mismatch: {q_vec.shape} vs {p_vec.shape}")
    return float(np.dot(q_vec, p_vec))


class DualEncoder:
    """Query and passage encoders, tied by default to a single weight set."""

    def __init__(self, q_weights: ModelWeights, p_weights: ModelWeights,
                 vocab: Vocabulary, cfg: ModelConfig, tied: bool):
        self.q_weights = q_weights
        self.p_weights = p_weights
        self.vocab = vocab
        self.cfg = cfg
        self.tied = tied
        self.query_encoder = TextEncoder(q_weights, vocab, cfg)
        self.passage_encoder = TextEncoder(p_weights, vocab, cfg)

    @classmethod
    def from_pretrained(cls, ckpt_path: str | Path, tied: bool = True) -> "DualEncoder":
        weights, vocab, _ = load_model(ckpt_path)
        q = weights.encoder_only()
        if tied:
            return cls(q, q, vocab, weights.cfg, tied=True)
        p = _clone_params(q)
        return cls(q, p, vocab, weights.cfg, tied=False)

    def trainable(self) -> dict[str, nn.Parameter]:
        params = {f"q.{n}": p for n, p in self.q_weights.params.items()}
        if not self.tied:
            params.update({f"p.{n}": p for n, p in self.p_weights.params.items()})
        return params


def _clone_params(weights: ModelWeights) -> ModelWeights:
    clone = object.__new__(ModelWeights)
    clone.cfg = weights.cfg
    clone.dtype = weights.dtype
    clone.params = {n: nn.Parameter(n, p.data.copy()) for n, p in weights.params.items()}
    return clone


class _DualParamSet:
    """Adapter exposing the dual encoder's parameters to the optimizer."""

    def __init__(self, dual: DualEncoder):
        self.cfg = dual.cfg
        self.dtype = dual.q_weights.dtype
        self.params = dual.trainable()

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def contrastive_loss(
    examples: Sequence[TrainingExample],
    dual: DualEncoder,
    queries: dict[str, str],
    passages: dict[str, str],
    in_batch: bool = True,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy of each positive against its candidate set, averaged.

    Candidates are the example's positive and negatives, plus every other
    example's candidates when ``in_batch`` is set.
    """
    if not examples:
        raise ValueError("empty batch")
    pids: list[str] = []
    targets: list[int] = []
    for ex in examples:
        targets.append(len(pids))
        pids.append(ex.positive)
        pids.extend(ex.negatives)
    if len(pids) < 2:
        raise ValueError("candidate set of size 1: add negatives or enable in-batch sharing")
    q_vecs = dual.query_encoder.cls_batch([queries[ex.query_id] for ex in examples], training, rng)
    p_vecs = dual.passage_encoder.cls_batch([passages[pid] for pid in pids], training, rng)
    scores = nn.matmul(q_vecs, nn.transpose(p_vecs, (1, 0)))  # [B, n_candidates]
    if in_batch:
        return nn.masked_cross_entropy(scores, np.asarray(targets))
    # Restrict each query to its own candidate block.
    losses = None
    for i, ex in enumerate(examples):
        width = 1 + len(ex.negatives)
        if width < 2:
            raise ValueError(f"query {ex.query_id!r} has a candidate set of size 1")
        block = nn.narrow(nn.narrow(scores, 0, i, 1), 1, targets[i], width)
        term = nn.masked_cross_entropy(block, np.asarray([0]))
        losses = term if losses is None else losses + term
    return losses / len(examples)


class DenseSearcher:
    """Retriever facade over an embedded corpus, for hard-negative mining."""

    def __init__(self, encoder: TextEncoder, index: PassageIndex):
        self.encoder = encoder
        self.index = index

    def search(self, query: str, k: int) -> list[tuple[str, float]]:
        return search(self.index, self.encoder.embed(query), k)


def mine_negatives(
    retriever,
    queries: dict[str, str],
    qrels: Qrels,
    depth: int,
    per_query: int,
) -> dict[str, list[str]]:
    """Top-``depth`` retrieved passages minus qrels-relevant, cut to ``per_query``."""
    if depth < per_query:
        raise ValueError("depth must be >= per_query")
    negatives: dict[str, list[str]] = {}
    for qid in queries:
        relevant = qrels.get(qid, set())
        hits = retriever.search(queries[qid], depth)
        negs = [pid for pid, _ in hits if pid not in relevant][:per_query]
        if len(negs) < per_query:
            logger.warning("query %s: only %d negatives survived qrels filtering", qid, len(negs))
        negatives[qid] = negs
    return negatives


def build_examples(
    qrels: Qrels,
    negatives: dict[str, list[str]],
) -> list[TrainingExample]:
    """One example per judged query; the lowest relevant id is the positive."""
    examples = []
    for qid in sorted(qrels):
        positive = min(qrels[qid])
        negs = [pid for pid in negatives.get(qid, []) if pid != positive]
        if not negs:
            logger.warning("query %s has no mined negatives; relying on in-batch negatives", qid)
        examples.append(TrainingExample(query_id=qid, positive=positive, negatives=negs))
    return examples


def union_negatives(*sources: dict[str, list[str]]) -> dict[str, list[str]]:
    """Order-preserving union per query, deduplicated."""
    merged: dict[str, list[str]] = {}
    for source in sources:
        for qid, negs in source.items():
            seen = merged.setdefault(qid, [])
            for pid in negs:
                if pid not in seen:
                    seen.append(pid)
    return merged


def save_dual_checkpoint(dual: DualEncoder, state: TrainState, path: str | Path) -> Path:
    return save_checkpoint(state, path, dual.vocab, kind="dual",
                           extra_meta={"tied": dual.tied, "encoder_only": True})


def load_dual_checkpoint(path: str | Path) -> DualEncoder:
    meta, tensors = read_checkpoint(path)
    if meta["kind"] != "dual":
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not a dual encoder")
    cfg = ModelConfig(**meta["model_cfg"])
    vocab = Vocabulary(meta["vocab"])
    dtype = np.float64 if meta["precision"] == "f64" else np.float32
    base = ModelWeights(cfg, np.random.default_rng(0), dtype=dtype).encoder_only()

    def side(prefix: str) -> ModelWeights:
        out = _clone_params(base)
        for name, p in out.params.items():
            arr = tensors[f"{prefix}{name}"]
            if arr.shape != p.data.shape:
                raise ValueError(f"tensor {prefix}{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(dtype, copy=False)
        return out

    q = side("q.")
    if meta["tied"]:
        return DualEncoder(q, q, vocab, cfg, tied=True)
    return DualEncoder(q, side("p."), vocab, cfg, tied=False)


def finetune_loop(
    examples: list[TrainingExample],
    ckpt_path: str | Path,
    optim_cfg: OptimConfig,
    out_dir: str | Path,
    queries: dict[str, str],
    passages: dict[str, str],
    seed: int = 0,
    deterministic: bool = False,
    tied: bool = True,
    in_batch: bool = True,
) -> Path:
    """Contrastive training from a pre-trained encoder; returns the dual checkpoint."""
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    dual = DualEncoder.from_pretrained(ckpt_path, tied=tied)
    cfg = dual.cfg
    if deterministic:
        from dataclasses import replace

        cfg = replace(cfg, dropout=0.0)
        dual.cfg = cfg
        dual.query_encoder.cfg = cfg
        dual.passage_encoder.cfg = cfg
        _cast_dual(dual, np.float64)
    rng = np.random.default_rng(seed)
    params = _DualParamSet(dual)
    state = TrainState.fresh(params, optim_cfg, rng)

    order = np.arange(len(examples))
    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        metrics.write("step,loss,lr\n")
        cursor = len(examples)  # force an initial shuffle
        while state.step < optim_cfg.total_steps:
            if cursor + optim_cfg.batch_size > len(order):
                rng.shuffle(order)
                cursor = 0
            batch = [examples[i] for i in order[cursor : cursor + optim_cfg.batch_size]]
            cursor += optim_cfg.batch_size
            loss = contrastive_loss(batch, dual, queries, passages,
                                    in_batch=in_batch, training=True, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise RuntimeError(f"non-finite fine-tuning loss at step {state.step + 1}")
            loss.backward()
            if optim_cfg.clip_norm is not None:
                clip_grads(params, optim_cfg.clip_norm)
            lr = lr_at(state.step, optim_cfg)
            adamw_step(state, {n: p.grad for n, p in params.params.items()}, lr)
            params.zero_grads()
            metrics.write(f"{state.step},{float(value)!r},{float(lr)!r}\n")

    return save_dual_checkpoint(dual, state, out_dir / "checkpoints" / "final.ckpt")


def run_finetune_stage(
    stage: int,
    pretrain_ckpt: str | Path,
    queries: dict[str, str],
    passages: dict[str, str],
    qrels: Qrels,
    optim_cfg: OptimConfig,
    out_dir: str | Path,
    depth: int = 200,
    per_query: int = 7,
    seed: int = 0,
    deterministic: bool = False,
    tied: bool = True,
    stage1_ckpt: str | Path | None = None,
) -> Path:
    """Mine negatives for the given stage, train, and return the checkpoint.

    Stage 1 mines from BM25 only; stage 2 unions BM25 negatives with hard
    negatives mined by the stage-1 retriever, deduplicated.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bm25_negs = mine_negatives(Bm25Index(passages), queries, qrels, depth, per_query)
    if stage == 1:
        negatives = bm25_negs
    else:
        if stage1_ckpt is None:
            raise ValueError("stage 2 requires the stage-1 checkpoint for mining")
        stage1 = load_dual_checkpoint(stage1_ckpt)
        index = build_index(passages, stage1.passage_encoder)
        dense_negs = mine_negatives(DenseSearcher(stage1.query_encoder, index),
                                    queries, qrels, depth, per_query)
        negatives = union_negatives(bm25_negs, dense_negs)
    examples = build_examples(qrels, negatives)
    write_examples(examples, out_dir / "examples.jsonl")
    return finetune_loop(examples, pretrain_ckpt, optim_cfg, out_dir, queries, passages,
                         seed=seed, deterministic=deterministic, tied=tied)


def _cast_dual(dual: DualEncoder, dtype) -> None:
    for weights in {id(dual.q_weights): dual.q_weights, id(dual.p_weights): dual.p_weights}.values():
        weights.dtype = np.dtype(dtype)
        for p in weights.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# File formats


def read_tsv(path: str | Path) -> dict[str, str]:
    """id<TAB>text rows, order preserved."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                key, text = line.split("\t", 1)
            except ValueError:
                raise ValueError(f"{path}:{line_no}: expected id<TAB>text") from None
            if key in out:
                raise ValueError(f"{path}:{line_no}: duplicate id {key!r}")
            out[key] = text
    return out


def read_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            qid, pid = line.split("\t")
            qrels.setdefault(qid, set()).add(pid)
    return qrels


def write_examples(examples: Iterable[TrainingExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(
                {"query_id": ex.query_id, "positive": ex.positive, "negatives": ex.negatives},
                ensure_ascii=False) + "\n")


def read_examples(path: str | Path) -> list[TrainingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(TrainingExample(obj["query_id"], obj["positive"], list(obj["negatives"])))
    return out
