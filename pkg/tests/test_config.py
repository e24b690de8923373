"""Configuration defaults, precedence and validation."""

import json

import pytest

from mcdn.config import (ConfigError, ModelConfig, TrainConfig, config_to_dict,
                         load_config, merge_config)


class TestDefaults:
    def test_model_defaults(self):
        cfg = ModelConfig()
        assert cfg.d == 128
        assert cfg.n_blocks == 4
        assert cfg.n_heads == 4
        assert cfg.d_f == 4 * 128
        assert cfg.k == 150
        assert cfg.windows == (2, 3, 4)
        assert cfg.channels_per_window == 50
        assert cfg.d_g == 64
        assert cfg.gru_layers == 2
        assert cfg.dropout == 0.5
        assert cfg.l2 == 3e-4
        assert cfg.alpha == 0.75
        assert cfg.beta == 4.0

    def test_train_defaults(self):
        tcfg = TrainConfig()
        assert tcfg.lr == 1e-4
        assert tcfg.batch_size == 32
        assert tcfg.epochs == 20
        assert tcfg.patience == 2
        assert tcfg.lr_factor == 0.5
        assert tcfg.adam_beta1 == 0.9
        assert tcfg.adam_beta2 == 0.999
        assert tcfg.adam_eps == 1e-8

    def test_empty_file_yields_defaults(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("")
        cfg, tcfg = load_config(str(p))
        assert cfg == ModelConfig()
        assert tcfg == TrainConfig()


class TestPrecedence:
    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"batch_size": 16}))
        _, tcfg = load_config(str(p), {"batch_size": 8})
        assert tcfg.batch_size == 8

    def test_file_beats_defaults(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"lr": 0.01, "d": 64}))
        cfg, tcfg = load_config(str(p))
        assert tcfg.lr == 0.01
        assert cfg.d == 64

    def test_none_override_ignored(self):
        _, tcfg = merge_config({}, {"lr": None})
        assert tcfg.lr == 1e-4


class TestValidation:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="banana"):
            merge_config({"banana": 1})

    def test_heads_must_divide_d(self):
        with pytest.raises(ConfigError, match="n_heads"):
            ModelConfig(d=10, n_heads=3)

    def test_k_must_split_over_windows(self):
        with pytest.raises(ConfigError, match="split"):
            ModelConfig(k=100, windows=(2, 3, 4))

    def test_alpha_range(self):
        with pytest.raises(ConfigError, match="alpha"):
            ModelConfig(alpha=1.0)

    def test_negative_beta(self):
        with pytest.raises(ConfigError, match="beta"):
            ModelConfig(beta=-1.0)

    def test_patience_floor(self):
        with pytest.raises(ConfigError, match="patience"):
            TrainConfig(patience=0)

    def test_positive_lr(self):
        with pytest.raises(ConfigError, match="lr"):
            TrainConfig(lr=0.0)

    def test_non_dict_file_is_error(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="flat"):
            load_config(str(p))


class TestRoundTrip:
    def test_config_to_dict_merges_back(self):
        cfg = ModelConfig(d=32, k=30, d_g=16)
        tcfg = TrainConfig(lr=2e-4, epochs=3)
        doc = config_to_dict(cfg, tcfg)
        cfg2, tcfg2 = merge_config(doc)
        assert cfg2 == cfg
        assert tcfg2 == tcfg
