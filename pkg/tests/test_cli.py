"""End-to-end CLI behavior: exit codes, outputs, determinism, overrides."""

import numpy as np
import pytest

import modcomp.cli as cli
from modcomp.cli import main
from modcomp.errors import TrainingDiverged
from modcomp.model import load_checkpoint

TINY_CFG = """\
# small geometry so the whole pipeline runs in well under a second per command
run.seed = 0
corpus.vocab_size = 32
corpus.n_classes = 8
corpus.n_ood_classes = 2
corpus.n_patches = 4
corpus.patch_dim = 6
corpus.content_len = 3
corpus.counts.TI_T = 16
corpus.counts.T_TI = 8
corpus.counts.TI_TI = 8
corpus.ood_fraction = 0.0
eval.counts.TI_T = 8
eval.counts.T_TI = 8
eval.counts.TI_TI = 8
eval.ood_fraction = 0.25
model.d_model = 8
model.n_heads = 2
model.n_layers = 1
model.t2i_layers = 1
model.n_visual_tokens = 4
model.max_text_len = 10
model.mlp_ratio = 2
padding.target_length = 8
train.steps = 4
train.batch_size = 8
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


def run_pipeline(cfg_path, out):
    assert main(["gen-data", "--config", cfg_path, "--out", str(out)]) == 0
    assert main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    assert main(["eval", "--config", cfg_path, "--out", str(out)]) == 0


class TestGenData:
    def test_writes_manifests_and_tallies(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["gen-data", "--config", cfg_path, "--out", str(out)]) == 0
        assert (out / "train_manifest.jsonl").exists()
        assert (out / "eval_manifest.jsonl").exists()
        stdout = capsys.readouterr().out
        assert "train: TI_T=16 TI_TI=8 T_TI=8 total=32" in stdout
        assert "eval: TI_T=8 TI_TI=8 T_TI=8 total=24" in stdout

    def test_rerun_is_byte_identical(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(["gen-data", "--config", cfg_path, "--out", str(out)])
        for name in ("train_manifest.jsonl", "eval_manifest.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_flag_changes_data(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen-data", "--config", cfg_path, "--out", str(a)])
        main(["gen-data", "--config", cfg_path, "--out", str(b), "--seed", "1"])
        assert (a / "train_manifest.jsonl").read_bytes() != (b / "train_manifest.jsonl").read_bytes()

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("run.seed = 0\ncorpus.vocabsize = 32\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "unknown key 'corpus.vocabsize'" in capsys.readouterr().err

    def test_empty_corpus_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "empty.cfg"
        cfg.write_text("run.seed = 0\ncorpus.counts.TI_T = 0\n"
                       "corpus.counts.T_TI = 0\ncorpus.counts.TI_TI = 0\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "zero records" in capsys.readouterr().err


class TestTrain:
    def test_requires_manifest(self, cfg_path, tmp_path, capsys):
        assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "o")]) == 2
        assert "run gen-data first" in capsys.readouterr().err

    def test_writes_checkpoint_and_trace(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        main(["gen-data", "--config", cfg_path, "--out", str(out)])
        assert main(["train", "--config", cfg_path, "--out", str(out)]) == 0
        assert (out / "checkpoint.bin").exists()
        assert len((out / "loss_trace.txt").read_text().splitlines()) == 4
        assert "trained 4 steps" in capsys.readouterr().out

    def test_t2i_layers_flag_reaches_checkpoint(self, cfg_path, tmp_path):
        out = tmp_path / "out"
        main(["gen-data", "--config", cfg_path, "--out", str(out)])
        main(["train", "--config", cfg_path, "--out", str(out), "--t2i-layers", "2"])
        assert load_checkpoint(out / "checkpoint.bin").cfg.t2i_layers == 2

    def test_aux_weight_flag_changes_training(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, alpha in ((a, "0.2"), (b, "0.0")):
            main(["gen-data", "--config", cfg_path, "--out", str(out)])
            main(["train", "--config", cfg_path, "--out", str(out), "--aux-weight", alpha])
        assert (a / "loss_trace.txt").read_bytes() != (b / "loss_trace.txt").read_bytes()

    def test_adapter_run_trains_and_checkpoints(self, cfg_path, tmp_path):
        out = tmp_path / "out"
        cfg = tmp_path / "adapter.cfg"
        cfg.write_text(TINY_CFG + "adapter.enabled = true\nadapter.rank = 2\n")
        main(["gen-data", "--config", str(cfg), "--out", str(out)])
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert load_checkpoint(out / "checkpoint.bin").cfg.d_model == 8

    def test_divergence_exits_3_with_rolled_back_checkpoint(self, cfg_path, tmp_path,
                                                            capsys, monkeypatch):
        out = tmp_path / "out"
        main(["gen-data", "--config", cfg_path, "--out", str(out)])

        def exploding(records, model, train_cfg, loss_cfg, trace_path=None):
            raise TrainingDiverged(2, float("nan"))

        monkeypatch.setattr(cli, "train", exploding)
        assert main(["train", "--config", cfg_path, "--out", str(out)]) == 3
        assert "rolled back" in capsys.readouterr().err
        assert (out / "checkpoint.bin").exists()


class TestEval:
    def test_writes_report(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        run_pipeline(cfg_path, out)
        assert (out / "score_report.jsonl").exists()
        stdout = capsys.readouterr().out
        assert "overall" in stdout

    def test_missing_checkpoint_exits_2(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        main(["gen-data", "--config", cfg_path, "--out", str(out)])
        assert main(["eval", "--config", cfg_path, "--out", str(out)]) == 2
        assert "cannot read checkpoint" in capsys.readouterr().err

    def test_corrupt_checkpoint_leaves_no_partial_report(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        main(["gen-data", "--config", cfg_path, "--out", str(out)])
        main(["train", "--config", cfg_path, "--out", str(out)])
        ckpt = out / "checkpoint.bin"
        ckpt.write_bytes(ckpt.read_bytes()[:100])
        assert main(["eval", "--config", cfg_path, "--out", str(out)]) == 2
        assert not (out / "score_report.jsonl").exists()
        assert "corrupt header" in capsys.readouterr().err

    def test_config_checkpoint_mismatch_names_both(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        main(["gen-data", "--config", cfg_path, "--out", str(out)])
        main(["train", "--config", cfg_path, "--out", str(out)])
        other = tmp_path / "other.cfg"
        other.write_text(TINY_CFG.replace("model.t2i_layers = 1", "model.t2i_layers = 2"))
        assert main(["eval", "--config", str(other), "--out", str(out)]) == 2
        err = capsys.readouterr().err
        assert "t2i_layers" in err
        assert "config 2" in err and "checkpoint 1" in err

    def test_explicit_checkpoint_and_manifest_paths(self, cfg_path, tmp_path):
        out = tmp_path / "out"
        run_pipeline(cfg_path, out)
        elsewhere = tmp_path / "elsewhere"
        code = main(["eval", "--out", str(elsewhere),
                     "--checkpoint", str(out / "checkpoint.bin"),
                     "--manifest", str(out / "eval_manifest.jsonl")])
        assert code == 0
        assert (elsewhere / "score_report.jsonl").read_bytes() == \
            (out / "score_report.jsonl").read_bytes()


class TestPipelineDeterminism:
    def test_full_pipeline_rerun_is_byte_identical(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_pipeline(cfg_path, a)
        run_pipeline(cfg_path, b)
        for name in ("train_manifest.jsonl", "eval_manifest.jsonl",
                     "loss_trace.txt", "checkpoint.bin", "score_report.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestBias:
    def test_writes_report(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["bias", "--config", cfg_path, "--out", str(out), "--seeds", "0"]) == 0
        assert (out / "bias_report.jsonl").exists()
        stdout = capsys.readouterr().out
        assert "dominant" in stdout and "spread" in stdout


class TestGradcheck:
    def test_single_seed_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "0"]) == 0
        stdout = capsys.readouterr().out
        assert "PASS" in stdout and "FAIL" not in stdout
