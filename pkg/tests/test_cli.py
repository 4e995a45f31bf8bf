"""Config parsing, flag precedence, and end-to-end CLI commands on tiny data."""

import json
import sys
from pathlib import Path

import pytest

from cotmae.cli import main, _parse_mixture
from cotmae.config import (
    ConfigError,
    RunConfig,
    apply_override,
    config_from_dict,
    parse_config,
    resolved_dict,
)

sys.path.insert(0, str(Path(__file__).parent))
from synthdata import write_pretrain_corpus, write_retrieval_files


class TestConfigParsing:
    def test_minimal_config_gets_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"paths": {"corpus": "x.jsonl"}}))
        cfg = parse_config(path)
        assert cfg.model.enc_mask_rate == 0.30
        assert cfg.model.dec_mask_rate == 0.45
        assert cfg.model.n_dec_layers == 2
        assert cfg.optim.peak_lr == 1e-4
        assert cfg.optim.warmup_ratio == 0.1
        assert cfg.sampler.max_span_len == 128

    def test_unknown_key_named_in_error(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": {"enc_maskrate": 0.15}}))
        with pytest.raises(ConfigError, match="model.enc_maskrate"):
            parse_config(path)

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="modle"):
            config_from_dict({"modle": {}})

    def test_invalid_value_surfaces_section(self):
        with pytest.raises(ConfigError, match="sampler"):
            config_from_dict({"sampler": {"max_span_len": 2}})

    def test_apply_override_validates_path(self):
        cfg = RunConfig()
        apply_override(cfg, "model.enc_mask_rate", 0.15)
        assert cfg.model.enc_mask_rate == 0.15
        with pytest.raises(ConfigError, match="model.bogus"):
            apply_override(cfg, "model.bogus", 1)

    def test_apply_override_revalidates(self):
        cfg = RunConfig()
        with pytest.raises(ConfigError):
            apply_override(cfg, "model.enc_mask_rate", 2.0)

    def test_resolved_roundtrip(self, tmp_path):
        cfg = RunConfig()
        cfg.model.enc_mask_rate = 0.15
        path = tmp_path / "resolved.json"
        path.write_text(json.dumps(resolved_dict(cfg)))
        again = parse_config(path)
        assert resolved_dict(again) == resolved_dict(cfg)


class TestMixtureFlag:
    def test_full_mixture(self):
        assert _parse_mixture("near,olap,rand=1,1,1") == pytest.approx((1 / 3, 1 / 3, 1 / 3))

    def test_subset_and_normalization(self):
        assert _parse_mixture("near,rand=3,1") == pytest.approx((0.75, 0.0, 0.25))

    def test_rejects_garbage(self):
        with pytest.raises(SystemExit):
            _parse_mixture("nearest=1")


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli-data")
    return write_pretrain_corpus(tmp / "corpus.jsonl")


class TestBuildPairsCommand:
    def test_writes_pairs_and_respects_seed(self, tmp_path, corpus_file, capsys):
        out = tmp_path / "pairs.jsonl"
        rc = main(["build-pairs", "--corpus", str(corpus_file), "--out", str(out),
                   "--epoch", "0", "--seed", "7", "--max-span-len", "20",
                   "--mixture", "near,olap,rand=1,1,1"])
        assert rc == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 8
        assert {"doc_id", "strategy", "a_text", "b_text", "a_sents", "b_sents"} == set(rows[0])
        printed = capsys.readouterr().out
        assert '"max_span_len": 20' in printed  # resolved config echoed

        out2 = tmp_path / "pairs2.jsonl"
        main(["build-pairs", "--corpus", str(corpus_file), "--out", str(out2),
              "--epoch", "0", "--seed", "7", "--max-span-len", "20"])
        assert out.read_bytes() == out2.read_bytes()

    def test_missing_corpus_fails(self, tmp_path):
        rc = main(["build-pairs", "--corpus", str(tmp_path / "nope.jsonl"),
                   "--out", str(tmp_path / "x.jsonl")])
        assert rc == 1


class TestPipelineCommands:
    @pytest.fixture(scope="class")
    def run_dir(self, tmp_path_factory, corpus_file):
        tmp = tmp_path_factory.mktemp("cli-run")
        rc = main(["pretrain", "--corpus", str(corpus_file), "--out", str(tmp / "pt"),
                   "--steps", "4", "--batch", "4", "--lr", "1e-3",
                   "--d-model", "16", "--n-heads", "2", "--d-ff", "32",
                   "--enc-layers", "1", "--dec-layers", "1",
                   "--max-span-len", "20", "--max-seq-len", "24",
                   "--seed", "0", "--deterministic"])
        assert rc == 0
        return tmp

    def test_pretrain_outputs(self, run_dir):
        pt = run_dir / "pt"
        assert (pt / "config.resolved.json").exists()
        assert (pt / "metrics.csv").exists()
        assert (pt / "vocab.txt").exists()
        assert (pt / "checkpoints/final.ckpt").exists()
        assert (pt / "loss_curve.png").exists()

    def test_flag_overrides_config_file(self, run_dir, corpus_file, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"model": {"enc_mask_rate": 0.30, "vocab_size": 64},
                                        "optim": {"total_steps": 3, "batch_size": 4}}))
        rc = main(["build-pairs", "--config", str(cfg_path),
                   "--corpus", str(corpus_file), "--out", str(tmp_path / "p.jsonl"),
                   "--max-span-len", "20"])
        assert rc == 0

        resolved = json.loads((run_dir / "pt" / "config.resolved.json").read_text())
        assert resolved["model"]["d_model"] == 16  # flag took effect over default

    def test_grad_check_command(self, capsys):
        rc = main(["grad-check", "--samples", "2", "--seed", "0"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS" in out

    def test_full_retrieval_pipeline(self, run_dir, tmp_path_factory, capsys):
        tmp = tmp_path_factory.mktemp("cli-retrieval")
        passages, queries, qrels = write_retrieval_files(tmp, n_passages=12)
        ckpt = run_dir / "pt/checkpoints/final.ckpt"

        rc = main(["finetune", "--stage", "1", "--ckpt", str(ckpt),
                   "--queries", str(queries), "--passages", str(passages),
                   "--qrels", str(qrels), "--out", str(tmp / "ft"),
                   "--steps", "3", "--batch", "4", "--lr", "1e-3",
                   "--depth", "5", "--per-query", "2", "--seed", "0", "--deterministic"])
        assert rc == 0
        dual_ckpt = tmp / "ft/checkpoints/final.ckpt"
        assert dual_ckpt.exists()
        assert (tmp / "ft/examples.jsonl").exists()
        assert (tmp / "ft/metrics.csv").exists()
        assert (tmp / "ft/loss_curve.png").exists()

        rc = main(["mine", "--retriever", "bm25", "--queries", str(queries),
                   "--passages", str(passages), "--qrels", str(qrels),
                   "--depth", "5", "--per-query", "2", "--out", str(tmp / "mined.jsonl")])
        assert rc == 0
        mined = [json.loads(l) for l in (tmp / "mined.jsonl").read_text().splitlines()]
        assert len(mined) == 12 and set(mined[0]) == {"query_id", "positive", "negatives"}

        rc = main(["encode", "--ckpt", str(dual_ckpt), "--passages", str(passages),
                   "--out", str(tmp / "p.idx")])
        assert rc == 0

        rc = main(["search", "--index", str(tmp / "p.idx"), "--ckpt", str(dual_ckpt),
                   "--queries", str(queries), "--k", "10", "--out", str(tmp / "run.trec")])
        assert rc == 0
        line = (tmp / "run.trec").read_text().splitlines()[0].split()
        assert line[1] == "Q0" and line[3] == "1"

        rc = main(["eval", "--run", str(tmp / "run.trec"), "--qrels", str(qrels),
                   "--metrics", "mrr@10,recall@5,ndcg@10", "--out", str(tmp / "eval")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "mrr@10\t" in out
        assert (tmp / "eval/metrics.csv").exists()
        assert (tmp / "eval/metrics.png").exists()

    def test_exit_code_on_bad_metric(self, run_dir, tmp_path):
        rc = main(["eval", "--run", str(tmp_path / "missing.trec"),
                   "--qrels", str(tmp_path / "missing.tsv")])
        assert rc == 1
