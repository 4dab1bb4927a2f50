"""Config parsing, schema enforcement, and derived values."""

import numpy as np
import pytest

from modcomp.config import (load_run_config, parse_config_text, resolve_config)
from modcomp.errors import ConfigError


def resolve(text):
    return resolve_config(parse_config_text(text))


MINIMAL = "run.seed = 3\n"


class TestParsing:
    def test_comments_and_blanks_skipped(self):
        raw = parse_config_text("# header\n\nrun.seed = 1  # trailing\n")
        assert raw == {"run.seed": "1"}

    def test_missing_equals_names_line(self):
        with pytest.raises(ConfigError, match="cfg:2"):
            parse_config_text("run.seed = 1\nbroken line\n", source="cfg")

    def test_duplicate_key_names_line(self):
        with pytest.raises(ConfigError, match="duplicate key 'run.seed'"):
            parse_config_text("run.seed = 1\nrun.seed = 2\n")

    def test_empty_value_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            parse_config_text("run.seed =\n")


class TestSchema:
    def test_minimal_config_uses_defaults(self):
        cfg = resolve(MINIMAL)
        assert cfg.seed == 3
        assert cfg.corpus.counts == {"TI_T": 2500, "T_TI": 1250, "TI_TI": 1250}
        assert cfg.model.d_model == 32
        assert cfg.train.seed == 3
        assert cfg.adapter is None
        assert cfg.loss.stop_grad_target is True

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="unknown key 'model.dmodel'"):
            resolve(MINIMAL + "model.dmodel = 64\n")

    def test_missing_seed_rejected(self):
        with pytest.raises(ConfigError, match="run.seed is required"):
            resolve("model.d_model = 32\n")

    def test_type_errors_name_the_key(self):
        with pytest.raises(ConfigError, match="corpus.vocab_size expects an integer"):
            resolve(MINIMAL + "corpus.vocab_size = abc\n")
        with pytest.raises(ConfigError, match="expects true or false"):
            resolve(MINIMAL + "run.disable_padding = yes\n")
        with pytest.raises(ConfigError, match="expects a number"):
            resolve(MINIMAL + "loss.temperature = warm\n")

    def test_scientific_notation_floats(self):
        cfg = resolve(MINIMAL + "train.learning_rate = 5e-4\n")
        assert cfg.train.learning_rate == 5e-4

    def test_model_geometry_copied_from_corpus(self):
        cfg = resolve(MINIMAL + "corpus.vocab_size = 48\ncorpus.n_classes = 12\n"
                                "corpus.n_ood_classes = 4\ncorpus.n_patches = 4\ncorpus.patch_dim = 6\n")
        assert cfg.model.vocab_size == 48
        assert cfg.model.n_patches == 4
        assert cfg.model.patch_dim == 6

    def test_text_budget_cross_check(self):
        with pytest.raises(ConfigError, match="max_text_len"):
            resolve(MINIMAL + "model.max_text_len = 5\n")


class TestPaddingDerivation:
    def test_target_length_defaults_to_visual_tokens(self):
        cfg = resolve(MINIMAL)
        assert cfg.padding.target_length == cfg.model.n_visual_tokens == 8

    def test_half_padding_halves_it(self):
        cfg = resolve(MINIMAL + "run.half_padding = true\n")
        assert cfg.padding.target_length == 4

    def test_explicit_target_length_wins(self):
        cfg = resolve(MINIMAL + "padding.target_length = 12\n")
        assert cfg.padding.target_length == 12

    def test_half_padding_conflicts_with_explicit(self):
        with pytest.raises(ConfigError, match="half_padding conflicts"):
            resolve(MINIMAL + "run.half_padding = true\npadding.target_length = 12\n")

    def test_reserved_ids_sit_above_vocab(self):
        cfg = resolve(MINIMAL + "padding.prompt_len = 2\n")
        assert min(cfg.padding.prompt) == cfg.corpus.vocab_size
        assert cfg.padding.dummy_token == cfg.corpus.vocab_size + 3


class TestAblationAndAdapters:
    def test_ablation_switches_map_through(self):
        cfg = resolve(MINIMAL + "run.disable_completion = true\nrun.baseline_mode = none\n"
                                "run.disable_aux_encoder = true\nrun.disable_padding = true\n")
        assert cfg.ablation.disable_completion
        assert cfg.ablation.baseline_mode == "none"
        assert cfg.ablation.disable_aux_encoder
        assert cfg.ablation.disable_padding

    def test_adapter_block(self):
        cfg = resolve(MINIMAL + "adapter.enabled = true\nadapter.rank = 4\nadapter.scaling = 0.5\n")
        assert cfg.adapter is not None
        assert (cfg.adapter.rank, cfg.adapter.scaling) == (4, 0.5)


class TestRunConfigHelpers:
    def test_eval_spec_shares_seed_with_fresh_stream(self):
        cfg = resolve(MINIMAL + "eval.counts.TI_T = 12\n")
        spec = cfg.eval_corpus_spec()
        assert spec.seed == cfg.corpus.seed
        assert spec.stream_tag == "eval"
        assert spec.counts["TI_T"] == 12
        assert spec.ood_fraction == pytest.approx(1.0 / 6.0)

    def test_build_model_is_deterministic(self):
        cfg = resolve(MINIMAL + "model.d_model = 8\nmodel.n_heads = 2\nmodel.n_layers = 1\n"
                                "corpus.vocab_size = 32\ncorpus.n_classes = 8\ncorpus.n_ood_classes = 2\n"
                                "corpus.n_patches = 4\ncorpus.patch_dim = 6\n")
        a, b = cfg.build_model(), cfg.build_model()
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


class TestLoading:
    def test_file_plus_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("run.seed = 1\ntrain.steps = 10\n")
        cfg = load_run_config(path, overrides={"train.steps": "20", "run.seed": "7"})
        assert cfg.train.steps == 20
        assert cfg.seed == 7

    def test_overrides_alone_suffice(self):
        cfg = load_run_config(None, overrides={"run.seed": "5"})
        assert cfg.seed == 5

    def test_missing_file_is_a_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_run_config(tmp_path / "absent.cfg")

    def test_bad_override_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(MINIMAL)
        with pytest.raises(ConfigError, match="unknown key"):
            load_run_config(path, overrides={"train.step": "20"})
