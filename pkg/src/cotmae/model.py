"""The contextual masked auto-encoder network.

A deep bidirectional encoder reconstructs each span from its own unmasked
tokens (self-MLM) and exposes its final [CLS] hidden state as the span's
context embedding.  A shallow decoder reconstructs the partner span from an
aggressively masked copy plus that context vector, which occupies slot 0 of
the decoder input.  The training objective sums both directions of a span
pair: total = smlm(A) + cmlm(A->B) + smlm(B) + cmlm(B->A).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .nncore import IGNORE_INDEX, MaskingError, Parameter, Tensor
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, TokenSequence

ATTN_MASK_BIAS = -1e9  # finite, underflows to exactly 0 after softmax

DECODER_INIT_MODES = ("random", "first", "spread", "last")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_enc_layers: int = 4
    n_dec_layers: int = 2
    max_seq_len: int = 128
    enc_mask_rate: float = 0.30
    dec_mask_rate: float = 0.45
    dropout: float = 0.1
    bert_corruption: bool = False  # 80/10/10 corruption instead of pure [MASK]
    dec_init: str = "random"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("enc_mask_rate", "dec_mask_rate"):
            rate = getattr(self, name)
            if not (0.0 <= rate < 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {rate}")
        if self.n_dec_layers < 1:
            raise ValueError("n_dec_layers must be >= 1")
        if self.dec_init not in DECODER_INIT_MODES:
            raise ValueError(f"dec_init must be one of {DECODER_INIT_MODES}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with draws outside 2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class ModelWeights:
    """All parameter tensors, keyed by name.

    Token/position embeddings and the MLM output projection (tied to the
    token table) are shared between encoder and decoder; each transformer
    layer owns its attention, feed-forward, and layer-norm parameters.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        d, ff = cfg.d_model, cfg.d_ff

        self._new("tok_emb", truncated_normal(rng, (cfg.vocab_size, d), 0.02, dtype))
        self._new("pos_emb", truncated_normal(rng, (cfg.max_seq_len, d), 0.02, dtype))
        self._new("mlm_bias", np.zeros(cfg.vocab_size, dtype=dtype))
        for prefix, n_layers in (("enc", cfg.n_enc_layers), ("dec", cfg.n_dec_layers)):
            for i in range(n_layers):
                base = f"{prefix}{i}"
                for mat in ("wq", "wk", "wv", "wo"):
                    self._new(f"{base}.attn.{mat}", truncated_normal(rng, (d, d), 0.02, dtype))
                for vec in ("bq", "bk", "bv", "bo"):
                    self._new(f"{base}.attn.{vec}", np.zeros(d, dtype=dtype))
                self._new(f"{base}.ln1.g", np.ones(d, dtype=dtype))
                self._new(f"{base}.ln1.b", np.zeros(d, dtype=dtype))
                self._new(f"{base}.ffn.w1", truncated_normal(rng, (d, ff), 0.02, dtype))
                self._new(f"{base}.ffn.b1", np.zeros(ff, dtype=dtype))
                self._new(f"{base}.ffn.w2", truncated_normal(rng, (ff, d), 0.02, dtype))
                self._new(f"{base}.ffn.b2", np.zeros(d, dtype=dtype))
                self._new(f"{base}.ln2.g", np.ones(d, dtype=dtype))
                self._new(f"{base}.ln2.b", np.zeros(d, dtype=dtype))

    def _new(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Parameter(name, data)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def encoder_only(self) -> "ModelWeights":
        """A view of this weight set without decoder layers (fine-tuning)."""
        clone = object.__new__(ModelWeights)
        clone.cfg = self.cfg
        clone.dtype = self.dtype
        clone.params = {k: v for k, v in self.params.items() if not k.startswith("dec")}
        return clone


def decoder_source_layers(n_enc: int, n_dec: int, mode: str) -> list[int]:
    """Which encoder layers seed the decoder under each init mode."""
    if mode == "first":
        return list(range(n_dec))
    if mode == "last":
        return list(range(n_enc - n_dec, n_enc))
    if mode == "spread":
        return [((i + 1) * n_enc) // n_dec - 1 for i in range(n_dec)]
    raise ValueError(f"no source layers for mode {mode!r}")


def init_decoder_from_encoder(weights: ModelWeights, mode: str) -> None:
    """Copy selected encoder layers into the decoder (in place)."""
    if mode == "random":
        return
    cfg = weights.cfg
    sources = decoder_source_layers(cfg.n_enc_layers, cfg.n_dec_layers, mode)
    for dec_i, enc_i in enumerate(sources):
        for name, p in list(weights.params.items()):
            if name.startswith(f"enc{enc_i}."):
                target = name.replace(f"enc{enc_i}.", f"dec{dec_i}.", 1)
                weights.params[target].data[...] = p.data


@dataclass
class MaskedSpan:
    """A token sequence after mask substitution, plus the reconstruction labels."""

    input_ids: TokenSequence
    labels: list[int]  # original id at masked positions, IGNORE_INDEX elsewhere
    mask_positions: list[int]


def mask_count(rate: float, maskable: int) -> int:
    """Half-up rounding of rate * maskable; the exact-count contract."""
    return int(rate * maskable + 0.5)


def apply_mask(
    seq: TokenSequence,
    rate: float,
    rng: np.random.Generator,
    bert_corruption: bool = False,
    vocab_size: int | None = None,
) -> MaskedSpan:
    """Mask exactly mask_count(rate, len-1) positions, never position 0.

    Pure [MASK] substitution by default; with ``bert_corruption`` the chosen
    positions get [MASK] 80% / random token 10% / unchanged 10% of the time.
    """
    if len(seq) < 2:
        raise ValueError("sequence must have at least 2 tokens")
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"mask rate must lie in [0, 1), got {rate}")
    maskable = len(seq) - 1
    count = mask_count(rate, maskable)
    positions = sorted(int(i) for i in rng.choice(maskable, size=count, replace=False) + 1)
    input_ids = list(seq)
    labels = [IGNORE_INDEX] * len(seq)
    for pos in positions:
        labels[pos] = seq[pos]
        if bert_corruption:
            r = rng.random()
            if r < 0.8:
                input_ids[pos] = MASK_ID
            elif r < 0.9:
                if vocab_size is None:
                    raise ValueError("bert_corruption needs vocab_size for random tokens")
                input_ids[pos] = int(rng.integers(5, vocab_size))
            # else: keep the original token
        else:
            input_ids[pos] = MASK_ID
    return MaskedSpan(input_ids=input_ids, labels=labels, mask_positions=positions)


def mask_nonempty(
    seq: TokenSequence, rate: float, rng: np.random.Generator, cfg: ModelConfig
) -> MaskedSpan:
    """apply_mask that retries once and then refuses empty masks."""
    for _ in range(2):
        masked = apply_mask(seq, rate, rng, cfg.bert_corruption, cfg.vocab_size)
        if masked.mask_positions:
            return masked
    raise MaskingError(f"no masked positions for sequence of length {len(seq)} at rate {rate}")


class MaskedBatch:
    """Padded id/label arrays for a batch of masked spans."""

    def __init__(self, spans: list[MaskedSpan], dtype=np.float32):
        if not spans:
            raise ValueError("empty batch")
        self.lengths = [len(s.input_ids) for s in spans]
        width = max(self.lengths)
        n = len(spans)
        self.ids = np.full((n, width), PAD_ID, dtype=np.intp)
        self.labels = np.full((n, width), IGNORE_INDEX, dtype=np.intp)
        for i, s in enumerate(spans):
            self.ids[i, : len(s.input_ids)] = s.input_ids
            self.labels[i, : len(s.labels)] = s.labels
        # Additive attention bias over key positions: 0 real, -1e9 pad.
        bias = np.zeros((n, 1, 1, width), dtype=dtype)
        for i, length in enumerate(self.lengths):
            bias[i, :, :, length:] = ATTN_MASK_BIAS
        self.attn_bias = Tensor(bias)

    @property
    def batch(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


@dataclass
class EncoderOutput:
    hidden: list[Tensor]  # per layer, [batch, seq, d_model]
    context_embedding: Tensor  # [batch, d_model], row 0 of the last layer
    self_mlm_loss: Tensor | None


@dataclass
class LossBreakdown:
    l_smlm_a: float
    l_cmlm_ab: float
    l_smlm_b: float
    l_cmlm_ba: float
    total: float
    total_node: Tensor | None = field(default=None, repr=False, compare=False)

    def backward(self) -> None:
        self.total_node.backward()


def _attention(x, bias, weights, base, cfg, training, rng):
    B, S = x.shape[0], x.shape[1]
    H, dh = cfg.n_heads, cfg.d_head

    def heads(name):
        proj = nn.matmul(x, weights[f"{base}.attn.w{name}"]) + weights[f"{base}.attn.b{name}"]
        return nn.transpose(nn.reshape(proj, (B, S, H, dh)), (0, 2, 1, 3))

    q, v = heads("q"), heads("v")
    k_t = nn.transpose(
        nn.reshape(nn.matmul(x, weights[f"{base}.attn.wk"]) + weights[f"{base}.attn.bk"], (B, S, H, dh)),
        (0, 2, 3, 1),
    )
    scores = nn.scale(nn.matmul(q, k_t), 1.0 / math.sqrt(dh)) + bias
    probs = nn.softmax(scores, axis=-1)
    if training:
        probs = nn.dropout(probs, cfg.dropout, rng)
    ctx = nn.reshape(nn.transpose(nn.matmul(probs, v), (0, 2, 1, 3)), (B, S, cfg.d_model))
    return nn.matmul(ctx, weights[f"{base}.attn.wo"]) + weights[f"{base}.attn.bo"]


def _transformer_stack(x, bias, weights, prefix, n_layers, cfg, training, rng):
    """Post-LN transformer layers; returns the hidden state after each layer."""
    hidden = []
    for i in range(n_layers):
        base = f"{prefix}{i}"
        attn = _attention(x, bias, weights, base, cfg, training, rng)
        if training:
            attn = nn.dropout(attn, cfg.dropout, rng)
        x = nn.layer_norm(x + attn, weights[f"{base}.ln1.g"], weights[f"{base}.ln1.b"])
        h = nn.matmul(nn.gelu(nn.matmul(x, weights[f"{base}.ffn.w1"]) + weights[f"{base}.ffn.b1"]),
                      weights[f"{base}.ffn.w2"]) + weights[f"{base}.ffn.b2"]
        if training:
            h = nn.dropout(h, cfg.dropout, rng)
        x = nn.layer_norm(x + h, weights[f"{base}.ln2.g"], weights[f"{base}.ln2.b"])
        hidden.append(x)
    return hidden


def _positions(weights: ModelWeights, width: int) -> Tensor:
    return nn.take_rows(weights["pos_emb"], np.arange(width))


def _mlm_loss(hidden: Tensor, labels: np.ndarray, weights: ModelWeights) -> Tensor:
    """Cross-entropy at labeled positions, logits tied to the token table."""
    B, S, d = hidden.shape
    flat_labels = labels.reshape(-1)
    picked = np.flatnonzero(flat_labels != IGNORE_INDEX)
    if picked.size == 0:
        raise MaskingError("no masked positions")
    rows = nn.take_rows(nn.reshape(hidden, (B * S, d)), picked)
    logits = nn.matmul(rows, nn.transpose(weights["tok_emb"], (1, 0))) + weights["mlm_bias"]
    return nn.masked_cross_entropy(logits, flat_labels[picked])


def _check_width(batch: MaskedBatch, cfg: ModelConfig) -> None:
    if batch.width > cfg.max_seq_len:
        raise ValueError(f"sequence length {batch.width} exceeds max_seq_len {cfg.max_seq_len}")


def encoder_forward_batch(
    batch: MaskedBatch,
    weights: ModelWeights,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    compute_mlm: bool = True,
) -> EncoderOutput:
    _check_width(batch, cfg)
    x = nn.embedding_lookup(weights["tok_emb"], batch.ids) + _positions(weights, batch.width)
    if training:
        x = nn.dropout(x, cfg.dropout, rng)
    hidden = _transformer_stack(x, batch.attn_bias, weights, "enc", cfg.n_enc_layers, cfg, training, rng)
    final = hidden[-1]
    context = nn.reshape(nn.narrow(final, 1, 0, 1), (batch.batch, cfg.d_model))
    loss = _mlm_loss(final, batch.labels, weights) if compute_mlm else None
    return EncoderOutput(hidden=hidden, context_embedding=context, self_mlm_loss=loss)


def decoder_forward_batch(
    context: Tensor,
    batch: MaskedBatch,
    weights: ModelWeights,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Context-MLM loss: the partner's context vector replaces slot 0."""
    if context.shape != (batch.batch, cfg.d_model):
        raise nn.ShapeError(
            f"context shape {context.shape} does not match (batch={batch.batch}, d_model={cfg.d_model})"
        )
    _check_width(batch, cfg)
    emb = nn.embedding_lookup(weights["tok_emb"], batch.ids)
    injected = nn.concat(nn.reshape(context, (batch.batch, 1, cfg.d_model)),
                         nn.narrow(emb, 1, 1, batch.width - 1), axis=1)
    x = injected + _positions(weights, batch.width)
    if training:
        x = nn.dropout(x, cfg.dropout, rng)
    hidden = _transformer_stack(x, batch.attn_bias, weights, "dec", cfg.n_dec_layers, cfg, training, rng)
    return _mlm_loss(hidden[-1], batch.labels, weights)


def encoder_forward(
    masked: MaskedSpan,
    weights: ModelWeights,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    compute_mlm: bool = True,
) -> EncoderOutput:
    """Single-span wrapper; hidden states come back unbatched ([seq, d])."""
    out = encoder_forward_batch(MaskedBatch([masked], weights.dtype), weights, cfg, training, rng, compute_mlm)
    seq = len(masked.input_ids)
    return EncoderOutput(
        hidden=[nn.reshape(h, (seq, cfg.d_model)) for h in out.hidden],
        context_embedding=nn.reshape(out.context_embedding, (cfg.d_model,)),
        self_mlm_loss=out.self_mlm_loss,
    )


def decoder_forward(
    context_embedding: Tensor,
    masked: MaskedSpan,
    weights: ModelWeights,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    ctx = nn.reshape(context_embedding, (1, cfg.d_model))
    return decoder_forward_batch(ctx, MaskedBatch([masked], weights.dtype), weights, cfg, training, rng)


def pair_loss(
    a_enc: MaskedBatch,
    b_dec: MaskedBatch,
    b_enc: MaskedBatch,
    a_dec: MaskedBatch,
    weights: ModelWeights,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Both directions from pre-masked batches; the deterministic core.

    Direction AB encodes A (self-MLM) and decodes B with A's context;
    direction BA is symmetric.  One backward pass on the returned total
    accumulates every gradient.
    """
    out_a = encoder_forward_batch(a_enc, weights, cfg, training, rng)
    l_cmlm_ab = decoder_forward_batch(out_a.context_embedding, b_dec, weights, cfg, training, rng)
    out_b = encoder_forward_batch(b_enc, weights, cfg, training, rng)
    l_cmlm_ba = decoder_forward_batch(out_b.context_embedding, a_dec, weights, cfg, training, rng)
    total = out_a.self_mlm_loss + l_cmlm_ab + out_b.self_mlm_loss + l_cmlm_ba
    return LossBreakdown(
        l_smlm_a=out_a.self_mlm_loss.item(),
        l_cmlm_ab=l_cmlm_ab.item(),
        l_smlm_b=out_b.self_mlm_loss.item(),
        l_cmlm_ba=l_cmlm_ba.item(),
        total=total.item(),
        total_node=total,
    )


def mask_pair_batches(
    pairs: list[tuple[TokenSequence, TokenSequence]],
    cfg: ModelConfig,
    rng: np.random.Generator,
    dtype,
) -> tuple[MaskedBatch, MaskedBatch, MaskedBatch, MaskedBatch]:
    """Draw fresh independent masks for every span in every role."""
    a_enc, b_dec, b_enc, a_dec = [], [], [], []
    for a, b in pairs:
        a_enc.append(mask_nonempty(a, cfg.enc_mask_rate, rng, cfg))
        b_dec.append(mask_nonempty(b, cfg.dec_mask_rate, rng, cfg))
        b_enc.append(mask_nonempty(b, cfg.enc_mask_rate, rng, cfg))
        a_dec.append(mask_nonempty(a, cfg.dec_mask_rate, rng, cfg))
    return (MaskedBatch(a_enc, dtype), MaskedBatch(b_dec, dtype),
            MaskedBatch(b_enc, dtype), MaskedBatch(a_dec, dtype))


def cotmae_loss(
    pair: tuple[TokenSequence, TokenSequence] | list[tuple[TokenSequence, TokenSequence]],
    weights: ModelWeights,
    cfg: ModelConfig,
    rng: np.random.Generator,
    training: bool = True,
) -> LossBreakdown:
    """Mask and score one span pair (or a batch of pairs) in both directions."""
    pairs = pair if isinstance(pair, list) else [pair]
    batches = mask_pair_batches(pairs, cfg, rng, weights.dtype)
    return pair_loss(*batches, weights, cfg, training=training, rng=rng)
