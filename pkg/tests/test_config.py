import json

import pytest

from vcpseg.config import RunConfig, load_config, require
from vcpseg.errors import ConfigError


class TestDefaults:
    def test_published_hyperparameters(self):
        cfg = RunConfig()
        assert cfg.train.learning_rate == 4e-5
        assert cfg.train.epochs == 10
        assert cfg.train.batch_size == 32
        assert (cfg.model.r, cfg.model.n, cfg.model.heads) == (2, 1, 8)
        assert cfg.model.tap_layers == [6, 12, 18, 24]
        assert cfg.model.image_size == 518
        assert cfg.model.alpha == 0.75
        assert cfg.model.state_pair == ["good", "damaged"]
        assert cfg.model.template == "a photo of a"
        assert cfg.loss.focal_gamma == 2.0
        assert cfg.metrics.pro_fpr_limit == 0.3

    def test_empty_file_is_defaults(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("", encoding="utf-8")
        assert load_config(p) == RunConfig()


class TestLoading:
    def test_yaml_and_json_agree(self, tmp_path):
        data = {"seed": 3, "model": {"alpha": 0.5, "tap_layers": [1, 2]}, "train": {"epochs": 2}}
        (tmp_path / "c.json").write_text(json.dumps(data), encoding="utf-8")
        (tmp_path / "c.yaml").write_text("seed: 3\nmodel: {alpha: 0.5, tap_layers: [1, 2]}\ntrain: {epochs: 2}\n")
        a, b = load_config(tmp_path / "c.json"), load_config(tmp_path / "c.yaml")
        assert a == b
        assert (a.seed, a.model.alpha, a.model.tap_layers, a.train.epochs) == (3, 0.5, [1, 2], 2)

    def test_unknown_key_named(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("model: {alpah: 0.5}\n")
        with pytest.raises(ConfigError, match="model.alpah"):
            load_config(p)

    def test_overrides(self):
        cfg = load_config(None, {"seed": 9, "train.learning_rate": 1e-3})
        assert cfg.seed == 9 and cfg.train.learning_rate == 1e-3

    def test_type_errors(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train: {epochs: many}\n")
        with pytest.raises(ConfigError, match="train.epochs"):
            load_config(p)

    @pytest.mark.parametrize(
        "override",
        [{"model.alpha": 1.5}, {"model.dtp_placement": "middle"}, {"train.learning_rate": 0}, {"backbone": "vit"}],
    )
    def test_validation(self, override):
        with pytest.raises(ConfigError):
            load_config(None, override)

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("model: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_require(self):
        assert require(1, "x") == 1
        with pytest.raises(ConfigError, match="dataset.train_root"):
            require(None, "dataset.train_root")
