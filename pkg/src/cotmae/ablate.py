"""Ablation grids: run the full toy pipeline per cell and tabulate metrics.

A grid is a list of override dicts (dotted config keys).  Every cell runs
pretrain -> stage-1 fine-tune -> encode/search -> eval with a shared seed;
failures are recorded and the remaining cells continue.  Presets mirror the
mask-rate and decoder-depth study layouts at toy scale.
"""

from __future__ import annotations

import copy
import csv
import logging
import traceback
from pathlib import Path

from .config import RunConfig, apply_override, require_paths
from .corpus import read_corpus
from .evalindex import build_index, compute_metric, run_queries
from .finetune import load_dual_checkpoint, read_qrels, read_tsv, run_finetune_stage
from .pretrain import pretrain_loop
from .tokenizer import train_vocab

logger = logging.getLogger(__name__)

PRESETS: dict[str, list[dict]] = {
    # Mask-rate grid: encoder {15, 30} x decoder {15, 30, 45} percent.
    "mask-rate": [
        {"model.enc_mask_rate": enc, "model.dec_mask_rate": dec}
        for enc in (0.15, 0.30)
        for dec in (0.15, 0.30, 0.45)
    ],
    # Decoder depth grid.
    "dec-layers": [{"model.n_dec_layers": n} for n in (1, 2, 3, 4, 6)],
}


def run_pipeline(cfg: RunConfig, out_dir: Path) -> dict[str, float]:
    """Pretrain, stage-1 fine-tune, retrieve, and evaluate one configuration."""
    paths = require_paths(cfg, "corpus", "queries", "passages", "qrels")
    docs = read_corpus(paths["corpus"])
    vocab = train_vocab((d.text for d in docs), cfg.model.vocab_size)
    from dataclasses import replace

    model_cfg = replace(cfg.model, vocab_size=vocab.size)
    ckpt = pretrain_loop(docs, cfg.sampler, model_cfg, cfg.optim, out_dir / "pretrain",
                         vocab, seed=cfg.seed, deterministic=cfg.deterministic)
    queries = read_tsv(paths["queries"])
    passages = read_tsv(paths["passages"])
    qrels = read_qrels(paths["qrels"])
    dual_ckpt = run_finetune_stage(
        1, ckpt, queries, passages, qrels, cfg.optim, out_dir / "stage1",
        depth=min(cfg.finetune.depth, len(passages)),
        per_query=min(cfg.finetune.per_query, max(1, len(passages) - 1)),
        seed=cfg.seed, deterministic=cfg.deterministic, tied=cfg.finetune.tied,
    )
    dual = load_dual_checkpoint(dual_ckpt)
    index = build_index(passages, dual.passage_encoder)
    run = run_queries(index, queries, dual.query_encoder, k=min(cfg.eval.k, len(passages)))
    return {m: compute_metric(m, run, qrels) for m in cfg.eval.metrics}


def run_ablation(grid: list[dict], base: RunConfig, out_dir: Path,
                 metrics: tuple[str, ...] = ("mrr@10",)) -> list[dict]:
    """One row per grid cell, in grid order; failed cells carry status=error."""
    if not grid:
        raise ValueError("empty ablation grid")
    out_dir.mkdir(parents=True, exist_ok=True)
    override_keys = sorted({k for cell in grid for k in cell})
    rows = []
    for i, cell in enumerate(grid):
        cfg = copy.deepcopy(base)
        row = {key: cell.get(key, "") for key in override_keys}
        try:
            for key, value in cell.items():
                apply_override(cfg, key, value)
            results = run_pipeline(cfg, out_dir / f"cell_{i:02d}")
            row["status"] = "ok"
            for m in metrics:
                row[m] = repr(results[m])
        except Exception as exc:  # cell failures must not kill the grid
            logger.error("ablation cell %d failed: %s", i, exc)
            logger.debug("%s", traceback.format_exc())
            row["status"] = "error"
            for m in metrics:
                row[m] = ""
        rows.append(row)
    return rows


def write_ablation_csv(rows: list[dict], path: Path) -> Path:
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path
