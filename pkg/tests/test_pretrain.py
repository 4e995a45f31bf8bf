"""Schedule, optimizer, checkpoint container, and training-loop contracts."""

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cotmae.corpus import Document, SamplerConfig
from cotmae.model import ModelConfig, ModelWeights
from cotmae.nncore import Parameter
from cotmae.pretrain import (
    CheckpointError,
    METRICS_HEADER,
    NonFiniteLossError,
    OptimConfig,
    TrainState,
    adamw_step,
    clip_grads,
    load_checkpoint,
    load_model,
    lr_at,
    pretrain_loop,
    read_checkpoint,
    save_checkpoint,
)
from cotmae.tokenizer import train_vocab

import sys

sys.path.insert(0, str(Path(__file__).parent))
from synthdata import PRETRAIN_MAX_SPAN_LEN, pretrain_docs


TINY_MODEL = ModelConfig(vocab_size=40, d_model=16, n_heads=2, d_ff=32,
                         n_enc_layers=1, n_dec_layers=1, max_seq_len=24, dropout=0.0)


def _tiny_state(seed=0, **optim_kw):
    optim = OptimConfig(total_steps=optim_kw.pop("total_steps", 10), **optim_kw)
    weights = ModelWeights(TINY_MODEL, np.random.default_rng(seed), dtype=np.float64)
    return TrainState.fresh(weights, optim, np.random.default_rng(seed))


class TestLrSchedule:
    CFG = OptimConfig(total_steps=1000, peak_lr=1e-4, warmup_ratio=0.1)

    def test_warmup_midpoint(self):
        assert lr_at(50, self.CFG) == pytest.approx(5e-5)

    def test_peak_at_warmup_end(self):
        assert lr_at(100, self.CFG) == pytest.approx(1e-4)

    def test_decay_midpoint(self):
        assert lr_at(550, self.CFG) == pytest.approx(5e-5)

    def test_zero_at_ends(self):
        assert lr_at(0, self.CFG) == 0.0
        assert lr_at(1000, self.CFG) == 0.0

    def test_single_peak_and_continuity(self):
        values = [lr_at(s, self.CFG) for s in range(1001)]
        peak = max(values)
        assert values.count(peak) == 1
        deltas = [abs(b - a) for a, b in zip(values, values[1:])]
        assert max(deltas) <= self.CFG.peak_lr / 100 + 1e-12

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(1001, self.CFG)


class TestAdamW:
    def test_zero_grads_no_decay_is_identity(self):
        state = _tiny_state(weight_decay=0.0)
        before = {n: p.data.copy() for n, p in state.weights.params.items()}
        grads = {n: np.zeros_like(p.data) for n, p in state.weights.params.items()}
        adamw_step(state, grads, lr=1e-3)
        for n, p in state.weights.params.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_single_scalar_first_step(self):
        # m_hat = 1, v_hat = 1 -> update = -lr / (1 + eps)
        p = Parameter("w", np.array([[2.0]]))

        class W:
            params = {"w": p}

        state = TrainState.fresh(W(), OptimConfig(total_steps=5, weight_decay=0.0), np.random.default_rng(0))
        adamw_step(state, {"w": np.array([[1.0]])}, lr=0.01)
        expected = 2.0 - 0.01 * (1.0 / (1.0 + 1e-8))
        assert p.data[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_decay_is_pure_shrink_with_zero_grads(self):
        state = _tiny_state(weight_decay=0.01)
        matrix = state.weights["enc0.attn.wq"]
        bias = state.weights["enc0.attn.bq"]
        bias.data[:] = 0.5
        m_before = matrix.data.copy()
        b_before = bias.data.copy()
        grads = {n: np.zeros_like(p.data) for n, p in state.weights.params.items()}
        adamw_step(state, grads, lr=0.1)
        np.testing.assert_allclose(matrix.data, m_before * (1 - 0.1 * 0.01), rtol=1e-12)
        np.testing.assert_array_equal(bias.data, b_before)  # 1-d params exempt

    def test_non_finite_grad_names_parameter(self):
        state = _tiny_state()
        grads = {n: np.zeros_like(p.data) for n, p in state.weights.params.items()}
        grads["tok_emb"][0, 0] = np.nan
        with pytest.raises(NonFiniteLossError, match="tok_emb"):
            adamw_step(state, grads, lr=1e-3)


def test_clip_grads_scales_to_max_norm():
    weights = ModelWeights(TINY_MODEL, np.random.default_rng(0), dtype=np.float64)
    for p in weights.params.values():
        p.grad = np.ones_like(p.data)
    clip_grads(weights, 1.0)
    total = sum(float((p.grad ** 2).sum()) for p in weights.params.values())
    assert math.sqrt(total) == pytest.approx(1.0, rel=1e-9)


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        vocab = train_vocab(["alpha beta gamma"], 12)
        state = _tiny_state()
        state.step = 7
        state.running = {"total": 3.5}
        p1 = save_checkpoint(state, tmp_path / "a.ckpt", vocab)
        loaded, vocab2 = load_checkpoint(p1)
        assert vocab2.tokens == vocab.tokens
        p2 = save_checkpoint(loaded, tmp_path / "b.ckpt", vocab2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_preserves_tensors_bitwise(self, tmp_path):
        vocab = train_vocab(["alpha beta"], 10)
        state = _tiny_state(seed=3)
        path = save_checkpoint(state, tmp_path / "w.ckpt", vocab)
        loaded, _ = load_checkpoint(path)
        for n, p in state.weights.params.items():
            assert p.data.tobytes() == loaded.weights.params[n].data.tobytes()
            assert state.m[n].tobytes() == loaded.m[n].tobytes()

    def test_rng_state_roundtrips(self, tmp_path):
        vocab = train_vocab(["alpha"], 8)
        state = _tiny_state()
        state.rng.random(13)  # advance
        expected = state.rng.bit_generator.state
        path = save_checkpoint(state, tmp_path / "r.ckpt", vocab)
        loaded, _ = load_checkpoint(path)
        assert loaded.rng.bit_generator.state == expected

    def test_corrupted_magic(self, tmp_path):
        vocab = train_vocab(["alpha"], 8)
        path = save_checkpoint(_tiny_state(), tmp_path / "c.ckpt", vocab)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="bad magic"):
            read_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        vocab = train_vocab(["alpha"], 8)
        path = save_checkpoint(_tiny_state(), tmp_path / "t.ckpt", vocab)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 20])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(path)

    def test_config_mismatch_names_tensor(self, tmp_path):
        vocab = train_vocab(["alpha"], 8)
        path = save_checkpoint(_tiny_state(), tmp_path / "m.ckpt", vocab)
        bigger = replace(TINY_MODEL, d_model=32, d_ff=64)
        with pytest.raises(CheckpointError, match="tok_emb"):
            load_checkpoint(path, expect_cfg=bigger)


@pytest.fixture(scope="module")
def toy_setup():
    docs = pretrain_docs()
    vocab = train_vocab([d.text for d in docs], target_size=64)
    sampler = SamplerConfig(max_span_len=PRETRAIN_MAX_SPAN_LEN, epoch_seed=0)
    model_cfg = ModelConfig(vocab_size=vocab.size, d_model=16, n_heads=2, d_ff=32,
                            n_enc_layers=1, n_dec_layers=1, max_seq_len=24, dropout=0.1)
    return docs, vocab, sampler, model_cfg


class TestPretrainLoop:
    def test_metrics_file_shape(self, tmp_path, toy_setup):
        docs, vocab, sampler, model_cfg = toy_setup
        optim = OptimConfig(total_steps=5, peak_lr=1e-3, batch_size=4)
        pretrain_loop(docs, sampler, model_cfg, optim, tmp_path, vocab, seed=0, deterministic=True)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 6
        row = lines[1].split(",")
        assert int(row[0]) == 1 and len(row) == 7
        total = float(row[5])
        assert abs(total - sum(float(x) for x in row[1:5])) < 1e-9

    def test_equal_seeds_identical_metrics(self, tmp_path, toy_setup):
        docs, vocab, sampler, model_cfg = toy_setup
        optim = OptimConfig(total_steps=6, peak_lr=1e-3, batch_size=4)
        pretrain_loop(docs, sampler, model_cfg, optim, tmp_path / "r1", vocab, seed=5, deterministic=True)
        pretrain_loop(docs, sampler, model_cfg, optim, tmp_path / "r2", vocab, seed=5, deterministic=True)
        assert (tmp_path / "r1/metrics.csv").read_bytes() == (tmp_path / "r2/metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted_bitwise(self, tmp_path, toy_setup):
        docs, vocab, sampler, model_cfg = toy_setup
        full = OptimConfig(total_steps=12, peak_lr=1e-3, batch_size=4)
        pretrain_loop(docs, sampler, model_cfg, full, tmp_path / "full", vocab,
                      seed=9, deterministic=True)
        pretrain_loop(docs, sampler, model_cfg, full, tmp_path / "half", vocab,
                      seed=9, deterministic=True, stop_after=6)
        # Continue to 12 steps from the 6-step checkpoint; lr schedule spans 12 steps.
        pretrain_loop(docs, sampler, model_cfg, full, tmp_path / "resumed", vocab,
                      resume_from=tmp_path / "half/checkpoints/final.ckpt", deterministic=True)
        full_rows = (tmp_path / "full/metrics.csv").read_text().splitlines()
        resumed_rows = (tmp_path / "resumed/metrics.csv").read_text().splitlines()
        assert resumed_rows[1:] == full_rows[7:]  # steps 7..12, bit-for-bit

    def test_accumulation_emulates_larger_batch(self, tmp_path, toy_setup):
        # Micro x accum consumes the same pairs with the same masks as one big
        # batch; losses are pooled per micro-batch, so trajectories agree only
        # up to the per-micro masked-position weighting.
        docs, vocab, sampler, model_cfg = toy_setup
        one = OptimConfig(total_steps=3, peak_lr=1e-3, batch_size=8, accum_steps=1)
        two = OptimConfig(total_steps=3, peak_lr=1e-3, batch_size=4, accum_steps=2)
        p1 = pretrain_loop(docs, sampler, model_cfg, one, tmp_path / "b8", vocab, seed=1, deterministic=True)
        p2 = pretrain_loop(docs, sampler, model_cfg, two, tmp_path / "b4x2", vocab, seed=1, deterministic=True)
        w1, _, _ = load_model(p1)
        w2, _, meta2 = load_model(p2)
        assert meta2["step"] == 3
        assert meta2["epoch"] * 8 + meta2["cursor"] == 3 * 8  # same pair consumption
        for n in w1.params:
            np.testing.assert_allclose(w1.params[n].data, w2.params[n].data, atol=5e-3)

    def test_vocab_travels_in_checkpoint(self, tmp_path, toy_setup):
        docs, vocab, sampler, model_cfg = toy_setup
        optim = OptimConfig(total_steps=2, peak_lr=1e-3, batch_size=4)
        ckpt = pretrain_loop(docs, sampler, model_cfg, optim, tmp_path, vocab, seed=0, deterministic=True)
        _, vocab2, meta = load_model(ckpt)
        assert vocab2.tokens == vocab.tokens
        assert meta["kind"] == "train"
