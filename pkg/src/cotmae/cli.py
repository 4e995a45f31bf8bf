"""Command-line entry point wiring the pipeline stages.

Subcommands: build-pairs, pretrain, finetune, mine, encode, search, eval,
ablate, grad-check.  Config precedence is defaults < --config file < explicit
flags.  Every command prints its fully-resolved config before running, and
run directories receive config.resolved.json next to their outputs.
COTMAE_THREADS caps numeric worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _cap_threads() -> None:
    cap = os.environ.get("COTMAE_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _parse_mixture(text: str) -> tuple[float, float, float]:
    """``near,olap,rand=1,1,1`` (any subset of names) -> normalized weights."""
    try:
        names_part, weights_part = text.split("=")
        names = [n.strip().lower() for n in names_part.split(",")]
        weights = [float(w) for w in weights_part.split(",")]
    except ValueError:
        raise SystemExit(f"bad --mixture {text!r}: expected e.g. near,olap,rand=1,1,1")
    if len(names) != len(weights) or not names:
        raise SystemExit(f"bad --mixture {text!r}: {len(names)} names vs {len(weights)} weights")
    by_name = {"near": 0.0, "olap": 0.0, "rand": 0.0}
    for name, w in zip(names, weights):
        if name not in by_name:
            raise SystemExit(f"bad --mixture {text!r}: unknown strategy {name!r}")
        by_name[name] = w
    total = sum(by_name.values())
    if total <= 0:
        raise SystemExit(f"bad --mixture {text!r}: weights sum to 0")
    return (by_name["near"] / total, by_name["olap"] / total, by_name["rand"] / total)


def _load_config(args) -> "RunConfig":
    from .config import RunConfig, parse_config

    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "corpus": ("paths", "corpus"),
        "queries": ("paths", "queries"),
        "passages": ("paths", "passages"),
        "qrels": ("paths", "qrels"),
        "out": ("paths", "out_dir"),
        "seed": ("", "seed"),
        "deterministic": ("", "deterministic"),
        "checkpoint_every": ("", "checkpoint_every"),
        "max_span_len": ("sampler", "max_span_len"),
        "olap_fraction": ("sampler", "olap_fraction"),
        "steps": ("optim", "total_steps"),
        "batch": ("optim", "batch_size"),
        "accum": ("optim", "accum_steps"),
        "lr": ("optim", "peak_lr"),
        "warmup": ("optim", "warmup_ratio"),
        "vocab_size": ("model", "vocab_size"),
        "d_model": ("model", "d_model"),
        "n_heads": ("model", "n_heads"),
        "d_ff": ("model", "d_ff"),
        "enc_mask": ("model", "enc_mask_rate"),
        "dec_mask": ("model", "dec_mask_rate"),
        "enc_layers": ("model", "n_enc_layers"),
        "dec_layers": ("model", "n_dec_layers"),
        "max_seq_len": ("model", "max_seq_len"),
        "dropout": ("model", "dropout"),
        "dec_init": ("model", "dec_init"),
        "stage": ("finetune", "stage"),
        "depth": ("finetune", "depth"),
        "per_query": ("finetune", "per_query"),
        "k": ("eval", "k"),
    }
    for flag, (section, name) in overrides.items():
        value = getattr(args, flag, None)
        if value is None or (flag == "deterministic" and value is False):
            continue
        target = getattr(cfg, section) if section else cfg
        setattr(target, name, value)
    if getattr(args, "mixture", None):
        cfg.sampler.mixture_weights = _parse_mixture(args.mixture)
    if getattr(args, "untied", False):
        cfg.finetune.tied = False
    if getattr(args, "no_figures", False):
        cfg.figures = False
    if getattr(args, "metrics", None):
        cfg.eval.metrics = tuple(m.strip() for m in args.metrics.split(","))
    # Re-validate sections that carry invariants.
    cfg.sampler.__post_init__()
    cfg.model.__post_init__()
    cfg.optim.__post_init__()
    return cfg


def _announce(cfg) -> None:
    from .config import resolved_dict

    print(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True))


def _prepare_run_dir(cfg, out_dir: Path) -> None:
    from .config import dump_config

    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.resolved.json")


def _load_any_encoder(ckpt_path):
    """A (query_encoder, passage_encoder) pair from any checkpoint kind."""
    from .finetune import DualEncoder, TextEncoder, load_dual_checkpoint
    from .pretrain import read_checkpoint, load_model

    meta, _ = read_checkpoint(ckpt_path)
    if meta["kind"] == "dual":
        dual = load_dual_checkpoint(ckpt_path)
        return dual.query_encoder, dual.passage_encoder
    weights, vocab, _ = load_model(ckpt_path)
    enc = TextEncoder(weights.encoder_only(), vocab, weights.cfg)
    return enc, enc


def cmd_build_pairs(args) -> int:
    from .config import require_paths
    from .corpus import build_pretrain_stream, read_corpus, write_pairs

    cfg = _load_config(args)
    cfg.sampler.epoch_seed = cfg.seed
    _announce(cfg)
    paths = require_paths(cfg, "corpus")
    docs = read_corpus(paths["corpus"])
    n = write_pairs(build_pretrain_stream(docs, cfg.sampler, args.epoch), args.out)
    print(f"wrote {n} pairs to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .config import require_paths
    from .corpus import read_corpus
    from .pretrain import pretrain_loop
    from .report import render_training_curves
    from .tokenizer import save_vocab, train_vocab
    from dataclasses import replace

    cfg = _load_config(args)
    cfg.sampler.epoch_seed = cfg.seed
    _announce(cfg)
    paths = require_paths(cfg, "corpus", "out_dir")
    out_dir = paths["out_dir"]
    _prepare_run_dir(cfg, out_dir)
    docs = read_corpus(paths["corpus"])
    vocab = train_vocab((d.text for d in docs), cfg.model.vocab_size)
    save_vocab(vocab, out_dir / "vocab.txt")
    model_cfg = replace(cfg.model, vocab_size=vocab.size)
    ckpt = pretrain_loop(
        docs, cfg.sampler, model_cfg, cfg.optim, out_dir, vocab,
        seed=cfg.seed, deterministic=cfg.deterministic,
        checkpoint_every=cfg.checkpoint_every,
        resume_from=args.resume, init_from=args.init_ckpt,
    )
    if cfg.figures:
        render_training_curves(out_dir / "metrics.csv")
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    from .config import require_paths
    from .finetune import read_qrels, read_tsv, run_finetune_stage
    from .report import render_training_curves

    cfg = _load_config(args)
    _announce(cfg)
    paths = require_paths(cfg, "queries", "passages", "qrels", "out_dir")
    out_dir = paths["out_dir"]
    _prepare_run_dir(cfg, out_dir)
    ckpt = run_finetune_stage(
        cfg.finetune.stage,
        args.ckpt,
        read_tsv(paths["queries"]),
        read_tsv(paths["passages"]),
        read_qrels(paths["qrels"]),
        cfg.optim,
        out_dir,
        depth=cfg.finetune.depth,
        per_query=cfg.finetune.per_query,
        seed=cfg.seed,
        deterministic=cfg.deterministic,
        tied=cfg.finetune.tied,
        stage1_ckpt=args.stage1_ckpt,
    )
    if cfg.figures:
        render_training_curves(out_dir / "metrics.csv")
    print(f"dual-encoder checkpoint: {ckpt}")
    return 0


def cmd_mine(args) -> int:
    from .bm25 import Bm25Index
    from .config import require_paths
    from .evalindex import build_index
    from .finetune import (
        DenseSearcher,
        build_examples,
        mine_negatives,
        read_qrels,
        read_tsv,
        write_examples,
    )

    cfg = _load_config(args)
    _announce(cfg)
    paths = require_paths(cfg, "queries", "passages", "qrels")
    queries = read_tsv(paths["queries"])
    passages = read_tsv(paths["passages"])
    qrels = read_qrels(paths["qrels"])
    if args.retriever == "bm25":
        retriever = Bm25Index(passages)
    else:
        if not args.ckpt:
            raise SystemExit("--ckpt is required for --retriever dense")
        q_enc, p_enc = _load_any_encoder(args.ckpt)
        retriever = DenseSearcher(q_enc, build_index(passages, p_enc))
    negatives = mine_negatives(retriever, queries, qrels, cfg.finetune.depth,
                               cfg.finetune.per_query)
    examples = build_examples(qrels, negatives)
    write_examples(examples, args.out)
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_encode(args) -> int:
    from .config import require_paths
    from .evalindex import build_index, save_index
    from .finetune import read_tsv

    cfg = _load_config(args)
    _announce(cfg)
    paths = require_paths(cfg, "passages")
    _, p_enc = _load_any_encoder(args.ckpt)
    index = build_index(read_tsv(paths["passages"]), p_enc)
    save_index(index, args.out)
    print(f"indexed {len(index.ids)} passages into {args.out}")
    return 0


def cmd_search(args) -> int:
    from .config import require_paths
    from .evalindex import load_index, run_queries, write_run
    from .finetune import read_tsv

    cfg = _load_config(args)
    _announce(cfg)
    paths = require_paths(cfg, "queries")
    q_enc, _ = _load_any_encoder(args.ckpt)
    index = load_index(args.index)
    run = run_queries(index, read_tsv(paths["queries"]), q_enc, k=cfg.eval.k)
    write_run(run, args.out)
    print(f"wrote run for {len(run)} queries to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .config import require_paths
    from .evalindex import compute_metric, read_run
    from .finetune import read_qrels

    cfg = _load_config(args)
    _announce(cfg)
    paths = require_paths(cfg, "qrels")
    run = read_run(args.run)
    results = {m: compute_metric(m, run, read_qrels(paths["qrels"])) for m in cfg.eval.metrics}
    for name, value in results.items():
        print(f"{name}\t{value:.6f}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            for name, value in results.items():
                fh.write(f"{name},{value!r}\n")
        if cfg.figures:
            from .report import render_metric_bars

            render_metric_bars(results, out_dir / "metrics.png")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import PRESETS, run_ablation, write_ablation_csv
    from .config import require_paths
    from .report import render_ablation_chart

    cfg = _load_config(args)
    _announce(cfg)
    paths = require_paths(cfg, "out_dir")
    out_dir = paths["out_dir"]
    _prepare_run_dir(cfg, out_dir)
    if args.grid:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
        if not isinstance(grid, list):
            raise SystemExit("--grid file must hold a JSON list of override objects")
    else:
        grid = PRESETS[args.preset]
    rows = run_ablation(grid, cfg, out_dir, metrics=("mrr@10",))
    csv_path = write_ablation_csv(rows, out_dir / "ablation.csv")
    if cfg.figures:
        render_ablation_chart(rows, out_dir / "ablation.png")
    print(f"wrote {len(rows)} ablation rows to {csv_path}")
    failed = sum(1 for r in rows if r["status"] != "ok")
    return 1 if failed else 0


def cmd_grad_check(args) -> int:
    import numpy as np

    from .model import MaskedBatch, ModelConfig, ModelWeights, mask_nonempty, pair_loss
    from .nncore import grad_check
    from .tokenizer import CLS_ID

    cfg = ModelConfig(vocab_size=50, d_model=16, n_heads=2, d_ff=32,
                      n_enc_layers=2, n_dec_layers=1, max_seq_len=16, dropout=0.0)
    print(json.dumps({"model": cfg.__dict__, "eps": args.eps, "samples": args.samples,
                      "seed": args.seed}, indent=2, sort_keys=True))
    weights = ModelWeights(cfg, np.random.default_rng(args.seed), dtype=np.float64)
    rng = np.random.default_rng(args.seed + 1)
    seq = lambda: [CLS_ID] + [int(rng.integers(5, cfg.vocab_size)) for _ in range(15)]
    sa, sb = seq(), seq()
    batches = tuple(
        MaskedBatch([mask_nonempty(s, rate, rng, cfg)], np.float64)
        for s, rate in ((sa, 0.30), (sb, 0.45), (sb, 0.30), (sa, 0.45))
    )

    def loss():
        return pair_loss(*batches, weights, cfg).total_node

    err = grad_check(loss, weights.parameters(), eps=args.eps,
                     samples_per_param=args.samples, rng=np.random.default_rng(args.seed))
    ok = err < 1e-3
    print(f"max relative error: {err:.3e} ({'PASS' if ok else 'FAIL'}, tolerance 1e-3)")
    return 0 if ok else 1


PRESET_NAMES = ("mask-rate", "dec-layers")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override file values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", default=False,
                   help="float64 + dropout 0; bit-reproducible runs")
    p.add_argument("--no-figures", dest="no_figures", action="store_true", default=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cotmae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-pairs", help="sample span pairs from a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--max-span-len", dest="max_span_len", type=int, default=None)
    p.add_argument("--mixture", default=None, help="e.g. near,olap,rand=1,1,1")
    p.add_argument("--olap-fraction", dest="olap_fraction", type=float, default=None)
    p.set_defaults(fn=cmd_build_pairs)

    p = sub.add_parser("pretrain", help="train the contextual masked auto-encoder")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--accum", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=float, default=None)
    p.add_argument("--enc-mask", dest="enc_mask", type=float, default=None)
    p.add_argument("--dec-mask", dest="dec_mask", type=float, default=None)
    p.add_argument("--enc-layers", dest="enc_layers", type=int, default=None)
    p.add_argument("--dec-layers", dest="dec_layers", type=int, default=None)
    p.add_argument("--d-model", dest="d_model", type=int, default=None)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=None)
    p.add_argument("--d-ff", dest="d_ff", type=int, default=None)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=None)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=None)
    p.add_argument("--max-span-len", dest="max_span_len", type=int, default=None)
    p.add_argument("--mixture", default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--dec-init", dest="dec_init", default=None,
                   choices=("random", "first", "spread", "last"))
    p.add_argument("--init-ckpt", dest="init_ckpt", default=None,
                   help="seed encoder (and decoder init modes) from a saved checkpoint")
    p.add_argument("--resume", default=None, help="resume training from a checkpoint")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="contrastive dual-encoder fine-tuning")
    _add_common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--ckpt", required=True, help="pre-trained encoder checkpoint")
    p.add_argument("--stage1-ckpt", dest="stage1_ckpt", default=None,
                   help="stage-1 dual checkpoint (required for --stage 2)")
    p.add_argument("--queries", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=float, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--per-query", dest="per_query", type=int, default=None)
    p.add_argument("--untied", action="store_true", default=False)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("mine", help="mine negatives into a training-examples file")
    _add_common(p)
    p.add_argument("--retriever", choices=("bm25", "dense"), required=True)
    p.add_argument("--ckpt", default=None, help="checkpoint for the dense retriever")
    p.add_argument("--queries", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--per-query", dest="per_query", type=int, default=None)
    p.set_defaults(fn=cmd_mine)

    p = sub.add_parser("encode", help="embed passages into a dense index")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("search", help="exact top-k retrieval over an index")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint providing the query encoder")
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("eval", help="score a TREC run file against qrels")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default=None, help="e.g. mrr@10,recall@50,ndcg@10")
    p.add_argument("--out", default=None, help="directory for metrics.csv and figure")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run a config grid through the toy pipeline")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESET_NAMES), default="mask-rate")
    p.add_argument("--grid", default=None, help="JSON file with a list of override objects")
    p.add_argument("--corpus", default=None)
    p.add_argument("--queries", default=None)
    p.add_argument("--passages", default=None)
    p.add_argument("--qrels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
