"""Subcommand smoke tests, config-file precedence, posterior-file format,
and exit codes."""

import json

import numpy as np
import pytest

import vadasr.autodiff as ad
from vadasr.audio import CorpusSpec, default_vocab, gen_synthetic_corpus, write_corpus, write_wav
from vadasr.cli import load_external_posteriors, main, save_posteriors
from vadasr.errors import FormatError
from vadasr.model import ModelParams, PosteriorGrid


def run_cli(*args):
    return main(list(args))


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    utts = gen_synthetic_corpus(CorpusSpec(utterance_count=4, seed=13))
    manifest = write_corpus(root, utts, default_vocab(5))
    return root, manifest, utts


@pytest.fixture(scope="module")
def model_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m.ckpt"
    ModelParams.init(default_vocab(5), seed=2).save(path)
    return path


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert run_cli("gen-corpus", "--frobnicate") == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert run_cli("gen-corpus") == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_file_is_data_error(self, capsys):
        assert run_cli("decode-posteriors",
                       "--posteriors", "/nonexistent/p.bin") == 2
        assert "error:" in capsys.readouterr().err

    def test_success_is_zero(self, tmp_path, capsys):
        assert run_cli("gen-corpus", "--out", str(tmp_path / "c"),
                       "--count", "2") == 0
        capsys.readouterr()


class TestGenCorpus:
    def test_writes_manifest_and_files(self, tmp_path, capsys):
        out = tmp_path / "c"
        assert run_cli("gen-corpus", "--out", str(out), "--count", "3",
                       "--seed", "5") == 0
        capsys.readouterr()
        assert (out / "manifest.jsonl").exists()
        assert (out / "vocab.json").exists()
        assert len(list(out.glob("*.wav"))) == 3

    def test_seed_determinism(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("gen-corpus", "--out", str(a), "--count", "2", "--seed", "9")
        run_cli("gen-corpus", "--out", str(b), "--count", "2", "--seed", "9")
        capsys.readouterr()
        wa = sorted(a.glob("*.wav"))[0].read_bytes()
        wb = sorted(b.glob("*.wav"))[0].read_bytes()
        assert wa == wb


class TestConfigFile:
    def test_flag_overrides_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"count": 5, "seed": 3}))
        out = tmp_path / "c"
        assert run_cli("gen-corpus", "--out", str(out), "--config", str(cfg),
                       "--count", "2") == 0
        capsys.readouterr()
        assert len(list(out.glob("*.wav"))) == 2  # flag beat config

    def test_config_overrides_default(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"count": 3}))
        out = tmp_path / "c"
        assert run_cli("gen-corpus", "--out", str(out),
                       "--config", str(cfg)) == 0
        capsys.readouterr()
        assert len(list(out.glob("*.wav"))) == 3

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"no_such_option": 1}))
        assert run_cli("gen-corpus", "--out", str(tmp_path / "c"),
                       "--config", str(cfg)) == 1
        assert "no_such_option" in capsys.readouterr().err


class TestPosteriorFormat:
    def make_grid(self, rng, T=6, V=2):
        logits = rng.normal(size=(T, V + 1))
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return PosteriorGrid(log_probs=ad.Tensor(logp),
                             vocab=[chr(ord("a") + i) for i in range(V)],
                             blank_index=V)

    def test_round_trip(self, rng, tmp_path):
        grid = self.make_grid(rng)
        path = tmp_path / "p.bin"
        save_posteriors(path, grid)
        back = load_external_posteriors(path)
        assert np.array_equal(back.array, grid.array)
        assert back.vocab == grid.vocab
        assert back.blank_index == grid.blank_index

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_external_posteriors(path)

    def test_truncated(self, rng, tmp_path):
        grid = self.make_grid(rng)
        path = tmp_path / "p.bin"
        save_posteriors(path, grid)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="bytes"):
            load_external_posteriors(path)

    def test_unnormalized_rows_rejected(self, rng, tmp_path):
        grid = self.make_grid(rng)
        path = tmp_path / "p.bin"
        save_posteriors(path, grid)
        blob = bytearray(path.read_bytes())
        bad = np.frombuffer(blob[12:], dtype="<f8").copy()
        bad += 0.5  # rows no longer sum to 1
        blob[12:] = bad.tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="normalized"):
            load_external_posteriors(path)

    def test_missing_sidecar(self, rng, tmp_path):
        grid = self.make_grid(rng)
        path = tmp_path / "p.bin"
        save_posteriors(path, grid)
        (tmp_path / "p.bin.json").unlink()
        with pytest.raises(FormatError, match="sidecar"):
            load_external_posteriors(path)

    def test_decode_command(self, rng, tmp_path, capsys):
        # peaked grid decodes to a known sequence
        logp = np.log(np.array([
            [0.9, 0.05, 0.05],
            [0.05, 0.05, 0.9],
            [0.05, 0.9, 0.05],
        ]))
        grid = PosteriorGrid(log_probs=ad.Tensor(logp), vocab=["a", "b"],
                             blank_index=2)
        path = tmp_path / "p.bin"
        save_posteriors(path, grid)
        assert run_cli("decode-posteriors", "--posteriors", str(path),
                       "--greedy") == 0
        assert capsys.readouterr().out.strip() == "a b"
        assert run_cli("decode-posteriors", "--posteriors", str(path),
                       "--beam-size", "4", "--lm-weight", "0",
                       "--word-score", "0") == 0
        assert capsys.readouterr().out.strip() == "a b"


class TestStreamCommands:
    def test_segment_and_transcribe(self, corpus_dir, model_ckpt, tmp_path,
                                    capsys):
        root, manifest, utts = corpus_dir
        wav = sorted(root.glob("*.wav"))[0]
        out = tmp_path / "events.jsonl"
        assert run_cli("segment", "--model", str(model_ckpt), "--wav",
                       str(wav), "--out", str(out), "--validate") == 0
        capsys.readouterr()
        assert out.exists()
        out2 = tmp_path / "tr.jsonl"
        assert run_cli("transcribe", "--model", str(model_ckpt), "--wav",
                       str(wav), "--out", str(out2), "--greedy",
                       "--max-chunk-s", "1.0") == 0
        capsys.readouterr()
        assert out2.exists()


class TestScore:
    def test_identical_transcripts_zero(self, tmp_path, capsys):
        ref = tmp_path / "ref.txt"
        hyp = tmp_path / "hyp.txt"
        ref.write_text("a b c\nd e\n")
        hyp.write_text("a b c\nd e\n")
        assert run_cli("score", "--ref", str(ref), "--hyp", str(hyp)) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["cer"] == 0.0

    def test_mismatch_counted(self, tmp_path, capsys):
        ref = tmp_path / "ref.txt"
        hyp = tmp_path / "hyp.txt"
        ref.write_text("a b c d\n")
        hyp.write_text("a x c\n")
        run_cli("score", "--ref", str(ref), "--hyp", str(hyp))
        rep = json.loads(capsys.readouterr().out)
        assert rep["cer"] == pytest.approx(0.5)  # 1 sub + 1 del over 4

    def test_line_count_mismatch(self, tmp_path, capsys):
        ref = tmp_path / "ref.txt"
        hyp = tmp_path / "hyp.txt"
        ref.write_text("a\nb\n")
        hyp.write_text("a\n")
        assert run_cli("score", "--ref", str(ref), "--hyp", str(hyp)) == 2
        capsys.readouterr()

    def test_events_mode_identity(self, tmp_path, capsys):
        from vadasr.streamer import END_OF_UTT, SegmentEvent, write_events

        events = [SegmentEvent(0.0, 0.5, ("a", "b"), END_OF_UTT),
                  SegmentEvent(1.0, 1.5, ("c",), END_OF_UTT)]
        ref = tmp_path / "ref.jsonl"
        hyp = tmp_path / "hyp.jsonl"
        write_events(ref, events)
        write_events(hyp, events)
        assert run_cli("score", "--ref", str(ref), "--hyp", str(hyp),
                       "--events") == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["cer"] == 0.0 and rep["deter"] == 0.0


class TestTrainCommand:
    def test_vad_stage_smoke(self, corpus_dir, tmp_path, capsys):
        root, manifest, utts = corpus_dir
        ckpt = tmp_path / "vad.ckpt"
        report = tmp_path / "report.json"
        assert run_cli("train", "--corpus", str(manifest), "--stage", "vad",
                       "--out", str(ckpt), "--epochs", "1",
                       "--report", str(report)) == 0
        capsys.readouterr()
        assert ckpt.exists() and report.exists()
        rep = json.loads(report.read_text())
        assert "ce_curve" in rep

    def test_asr_stage_with_lm(self, corpus_dir, tmp_path, capsys):
        root, manifest, utts = corpus_dir
        ckpt = tmp_path / "asr.ckpt"
        lm = tmp_path / "lm.json"
        assert run_cli("train", "--corpus", str(manifest), "--stage", "asr",
                       "--out", str(ckpt), "--epochs", "1",
                       "--lm-out", str(lm)) == 0
        capsys.readouterr()
        assert ckpt.exists() and lm.exists()
        back = ModelParams.load(ckpt)
        assert back.vocab == default_vocab(5)

    def test_bad_stage(self, corpus_dir, tmp_path, capsys):
        root, manifest, utts = corpus_dir
        assert run_cli("train", "--corpus", str(manifest), "--stage", "xxl",
                       "--out", str(tmp_path / "m.ckpt")) == 1
        capsys.readouterr()
