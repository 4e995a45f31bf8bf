"""Pre-training loop: AdamW with linear warmup/decay, checkpoints, telemetry.

Checkpoints are a little-endian binary container (magic ``CTMAE1``): a JSON
metadata block followed by named raw tensors.  In deterministic mode the
whole trajectory, including resume-from-checkpoint, is reproducible
bit-for-bit, so tensors are stored in their native precision (f32 in
training mode, f64 in deterministic mode).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import Document, SamplerConfig, build_pretrain_stream
from .model import (
    LossBreakdown,
    ModelConfig,
    ModelWeights,
    cotmae_loss,
    init_decoder_from_encoder,
    mask_count,
)
from .tokenizer import Vocabulary, encode

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CTMAE1"
CKPT_VERSION = 1

METRICS_HEADER = "step,l_smlm_a,l_cmlm_ab,l_smlm_b,l_cmlm_ba,total,lr"


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class OptimConfig:
    total_steps: int
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    accum_steps: int = 1
    clip_norm: float | None = 1.0  # None disables clipping

    def __post_init__(self):
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass
class TrainState:
    weights: ModelWeights
    optim_cfg: OptimConfig
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    cursor: int = 0  # pairs consumed within the current epoch
    running: dict[str, float] = field(default_factory=dict)

    @classmethod
    def fresh(cls, weights: ModelWeights, optim_cfg: OptimConfig, rng: np.random.Generator):
        zeros = {name: np.zeros_like(p.data) for name, p in weights.params.items()}
        return cls(
            weights=weights,
            optim_cfg=optim_cfg,
            m=zeros,
            v={name: z.copy() for name, z in zeros.items()},
            rng=rng,
        )


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear 0 -> peak over the warmup leg, then linear peak -> 0."""
    if not (0 <= step <= cfg.total_steps):
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup = cfg.warmup_ratio * cfg.total_steps
    if warmup > 0 and step <= warmup:
        return cfg.peak_lr * step / warmup
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - warmup)


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> TrainState:
    """One decoupled-weight-decay Adam update, in place.

    Decay applies only to matrices and embedding tables (ndim >= 2); biases
    and layer-norm parameters are exempt.
    """
    b1, b2 = state.optim_cfg.betas
    eps = state.optim_cfg.eps
    wd = state.optim_cfg.weight_decay
    t = state.step + 1
    for name, p in state.weights.params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NonFiniteLossError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if wd > 0 and p.data.ndim >= 2:
            p.data -= lr * wd * p.data
    state.step = t
    return state


def global_grad_norm(weights: ModelWeights) -> float:
    total = 0.0
    for p in weights.params.values():
        total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grads(weights: ModelWeights, max_norm: float) -> float:
    norm = global_grad_norm(weights)
    if norm > max_norm:
        scale = max_norm / norm
        for p in weights.params.values():
            p.grad *= scale
    return norm


# --------------------------------------------------------------------------
# Checkpoint container


def _meta_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_checkpoint(state: TrainState, path: str | Path, vocab: Vocabulary, kind: str = "train",
                    extra_meta: dict | None = None) -> Path:
    """Serialize config, weights, optimizer moments, step, and rng state."""
    weights = state.weights
    precision = "f64" if weights.dtype == np.float64 else "f32"
    meta = {
        "kind": kind,
        "precision": precision,
        "model_cfg": asdict(weights.cfg),
        "optim_cfg": asdict(state.optim_cfg) if kind == "train" else None,
        "step": state.step,
        "epoch": state.epoch,
        "cursor": state.cursor,
        "rng_state": _rng_state(state.rng) if kind == "train" else None,
        "running": state.running,
        "vocab": vocab.tokens,
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in weights.params.items()]
    if kind == "train":
        tensors += [(f"m.{n}", a) for n, a in state.m.items()]
        tensors += [(f"v.{n}", a) for n, a in state.v.items()]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        blob = _meta_json(meta)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse the raw container; returns (meta, name -> array)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        dtype = np.dtype(np.float64 if meta["precision"] == "f64" else np.float32)
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            raw = _read_exact(fh, int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return meta, tensors


def _fill_weights(weights: ModelWeights, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, p in weights.params.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = tensors[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"tensor {key!r}: checkpoint shape {arr.shape} != expected {p.data.shape}"
            )
        p.data = arr.astype(weights.dtype, copy=False)
        p.grad = np.zeros_like(p.data)


def load_model(path: str | Path, expect_cfg: ModelConfig | None = None) -> tuple[ModelWeights, Vocabulary, dict]:
    """Load weights + vocabulary from any checkpoint kind."""
    meta, tensors = read_checkpoint(path)
    cfg = ModelConfig(**meta["model_cfg"])
    if expect_cfg is not None:
        cfg = expect_cfg
    dtype = np.float64 if meta["precision"] == "f64" else np.float32
    weights = ModelWeights(cfg, np.random.default_rng(0), dtype=dtype)
    _fill_weights(weights, tensors)
    return weights, Vocabulary(meta["vocab"]), meta


def load_checkpoint(path: str | Path, expect_cfg: ModelConfig | None = None) -> tuple[TrainState, Vocabulary]:
    meta, tensors = read_checkpoint(path)
    if meta["kind"] != "train":
        raise CheckpointError(f"checkpoint kind {meta['kind']!r} has no optimizer state")
    cfg = ModelConfig(**meta["model_cfg"]) if expect_cfg is None else expect_cfg
    dtype = np.float64 if meta["precision"] == "f64" else np.float32
    weights = ModelWeights(cfg, np.random.default_rng(0), dtype=dtype)
    _fill_weights(weights, tensors)
    optim = meta["optim_cfg"]
    optim["betas"] = tuple(optim["betas"])
    state = TrainState(
        weights=weights,
        optim_cfg=OptimConfig(**optim),
        m={n: tensors[f"m.{n}"] for n in weights.params},
        v={n: tensors[f"v.{n}"] for n in weights.params},
        rng=_rng_from_state(meta["rng_state"]),
        step=meta["step"],
        epoch=meta["epoch"],
        cursor=meta["cursor"],
        running=meta["running"],
    )
    return state, Vocabulary(meta["vocab"])


# --------------------------------------------------------------------------
# Training loop


def _fmt(x: float) -> str:
    return repr(float(x))


def _metrics_row(step: int, mean: LossBreakdown, lr: float) -> str:
    return ",".join(
        [str(step)]
        + [_fmt(v) for v in (mean.l_smlm_a, mean.l_cmlm_ab, mean.l_smlm_b, mean.l_cmlm_ba, mean.total)]
        + [_fmt(lr)]
    )


def _epoch_pairs(docs, sampler_cfg: SamplerConfig, epoch: int, vocab: Vocabulary,
                 model_cfg: ModelConfig, skip_counter: list[int]):
    """Token-sequence pairs for one epoch, dropping un-maskable spans."""
    for pair in build_pretrain_stream(docs, sampler_cfg, epoch):
        a = encode(pair.a.text, vocab, model_cfg.max_seq_len)
        b = encode(pair.b.text, vocab, model_cfg.max_seq_len)
        ok = all(
            mask_count(rate, len(ids) - 1) > 0
            for ids in (a, b)
            for rate in (model_cfg.enc_mask_rate, model_cfg.dec_mask_rate)
        )
        if not ok:
            skip_counter[0] += 1
            logger.warning("skipping pair from %s: a mask role would be empty (%d skipped)",
                           pair.a.doc_id, skip_counter[0])
            continue
        yield (a, b)


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    n = len(parts)
    return LossBreakdown(
        l_smlm_a=sum(p.l_smlm_a for p in parts) / n,
        l_cmlm_ab=sum(p.l_cmlm_ab for p in parts) / n,
        l_smlm_b=sum(p.l_smlm_b for p in parts) / n,
        l_cmlm_ba=sum(p.l_cmlm_ba for p in parts) / n,
        total=sum(p.total for p in parts) / n,
    )


def pretrain_loop(
    docs: list[Document],
    sampler_cfg: SamplerConfig,
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    out_dir: str | Path,
    vocab: Vocabulary,
    seed: int = 0,
    deterministic: bool = False,
    checkpoint_every: int = 0,
    resume_from: str | Path | None = None,
    init_from: str | Path | None = None,
    stop_after: int | None = None,
) -> Path:
    """Train to ``optim_cfg.total_steps`` and return the final checkpoint path.

    Deterministic mode runs in float64 with dropout disabled; with equal
    seeds it reproduces metrics files byte for byte.  ``init_from`` loads
    encoder weights from an earlier checkpoint before applying the decoder
    initialization mode.  ``stop_after`` halts early (an interrupted run)
    without shortening the lr schedule, for later resume.  Aborts on a
    non-finite loss, retaining the last good checkpoint.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if deterministic:
        model_cfg = replace(model_cfg, dropout=0.0)
    dtype = np.float64 if deterministic else np.float32

    if resume_from is not None:
        state, vocab = load_checkpoint(resume_from, expect_cfg=model_cfg)
        metrics_mode = "a"
    else:
        rng = np.random.default_rng(seed)
        weights = ModelWeights(model_cfg, rng, dtype=dtype)
        if init_from is not None:
            loaded, _, _ = load_model(init_from, expect_cfg=model_cfg)
            for name, p in loaded.params.items():
                weights.params[name].data = p.data.astype(dtype, copy=False)
        init_decoder_from_encoder(weights, model_cfg.dec_init)
        state = TrainState.fresh(weights, optim_cfg, rng)
        metrics_mode = "w"

    metrics_path = out_dir / "metrics.csv"
    skip_counter = [0]
    micro_parts: list[LossBreakdown] = []
    micro_count = 0
    last_ckpt: Path | None = None

    write_header = metrics_mode == "w" or not metrics_path.exists()
    with open(metrics_path, metrics_mode, encoding="utf-8") as metrics:
        if write_header:
            metrics.write(METRICS_HEADER + "\n")

        def epoch_stream():
            while True:
                gen = _epoch_pairs(docs, sampler_cfg, state.epoch, vocab, model_cfg, skip_counter)
                yielded = 0
                for i, pair in enumerate(gen):
                    if i < state.cursor:
                        continue
                    state.cursor = i + 1
                    yielded += 1
                    yield pair
                if yielded == 0 and state.cursor == 0:
                    raise ValueError("corpus produced no usable span pairs")
                state.epoch += 1
                state.cursor = 0

        batch: list = []
        stream = epoch_stream()
        stop_at = optim_cfg.total_steps if stop_after is None else min(stop_after, optim_cfg.total_steps)
        while state.step < stop_at:
            batch.append(next(stream))
            if len(batch) < optim_cfg.batch_size:
                continue
            breakdown = cotmae_loss(batch, state.weights, model_cfg, state.rng, training=True)
            batch = []
            if not math.isfinite(breakdown.total):
                raise NonFiniteLossError(
                    f"non-finite loss at step {state.step + 1}"
                    + (f"; last good checkpoint: {last_ckpt}" if last_ckpt else "")
                )
            (breakdown.total_node / optim_cfg.accum_steps).backward()
            micro_parts.append(breakdown)
            micro_count += 1
            if micro_count < optim_cfg.accum_steps:
                continue

            if optim_cfg.clip_norm is not None:
                clip_grads(state.weights, optim_cfg.clip_norm)
            lr = lr_at(state.step, optim_cfg)
            grads = {n: p.grad for n, p in state.weights.params.items()}
            adamw_step(state, grads, lr)
            state.weights.zero_grads()

            mean = _mean_breakdown(micro_parts)
            micro_parts, micro_count = [], 0
            for key, val in (("l_smlm_a", mean.l_smlm_a), ("l_cmlm_ab", mean.l_cmlm_ab),
                             ("l_smlm_b", mean.l_smlm_b), ("l_cmlm_ba", mean.l_cmlm_ba),
                             ("total", mean.total)):
                prev = state.running.get(key, 0.0)
                state.running[key] = prev + (val - prev) / state.step
            metrics.write(_metrics_row(state.step, mean, lr) + "\n")

            if checkpoint_every and state.step % checkpoint_every == 0:
                last_ckpt = save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.ckpt", vocab)

    final = save_checkpoint(state, ckpt_dir / "final.ckpt", vocab)
    if skip_counter[0]:
        logger.warning("skipped %d un-maskable pairs in total", skip_counter[0])
    return final
