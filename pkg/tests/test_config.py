import pytest

from ps2kit import config as config_module
from ps2kit.config import AblationConfig, PS2Config, apply_overrides, load_config, validate_config
from ps2kit.errors import ConfigError


@pytest.fixture(autouse=True)
def no_user_config(monkeypatch):
    monkeypatch.setattr(config_module, "CONFIG_PATH_CANDIDATES", [])


class TestDefaults:
    def test_reference_hyperparameters(self):
        cfg = load_config()
        assert cfg.lr0 == 1e-4
        assert cfg.epochs == 25 and cfg.lr_halving_epochs == 5
        assert cfg.res == 128 and cfg.batch_size == 32
        assert (cfg.lambda_l1, cfg.lambda_l2, cfg.lambda_perp) == (0.5, 0.5, 1.0)
        assert cfg.tau_s == 0.99 and cfg.warmup_samples == 10
        assert cfg.ablation == AblationConfig()

    def test_to_dict_is_flat(self):
        d = PS2Config().to_dict()
        assert d["mode"] == "selfsup"
        assert all(not isinstance(v, dict) for v in d.values())


class TestFileAndOverrides:
    def test_yaml_file(self, tmp_path):
        path = tmp_path / "ps2kit.yaml"
        path.write_text("res: 64\nwidth_scale: 0.5\npe: false\n", encoding="utf-8")
        cfg = load_config(str(path))
        assert cfg.res == 64 and cfg.width_scale == 0.5 and cfg.pe is False

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "ps2kit.yaml"
        path.write_text("epochs: 10\n", encoding="utf-8")
        cfg = load_config(str(path), {"epochs": 3, "seed": None})
        assert cfg.epochs == 3 and cfg.seed == 0

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.yaml"))

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("res: [64\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_non_mapping_yaml(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_unknown_keys_are_reported(self):
        cfg = PS2Config()
        assert apply_overrides(cfg, {"learning_rate": 1, "batch-size": 4}) == ["learning_rate"]
        assert cfg.batch_size == 4

    def test_string_coercion(self):
        cfg = PS2Config()
        apply_overrides(cfg, {"ir": "off", "lr0": "2e-4", "epochs": "7"})
        assert cfg.ir is False and cfg.lr0 == 2e-4 and cfg.epochs == 7

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            apply_overrides(PS2Config(), {"epochs": "many"})


class TestValidation:
    @pytest.mark.parametrize("over", [
        {"res": 100},
        {"lr0": 0.0},
        {"lambda_l2": -1.0},
        {"warmup_samples": 2},
        {"warmup_iters": 10_000},
        {"mode": "distilled"},
        {"le": False},
        {"ar": False},
        {"calibrated_light": "oracle"},
    ])
    def test_rejected(self, over):
        with pytest.raises(ConfigError):
            load_config(overrides=over)

    def test_consistent_ablation_without_lighting(self):
        cfg = load_config(overrides={"le": False, "ar": False, "pe": False, "ir": False})
        assert not cfg.ablation.le

    def test_warmup_length_ignored_when_disabled(self):
        cfg = load_config(overrides={"warmup": False, "warmup_iters": 10_000})
        assert validate_config(cfg) is cfg

    def test_frontal_mode_needs_lighting(self):
        with pytest.raises(ConfigError):
            AblationConfig(le=False, ar=False, pe=False, ir=False, mode="frontal").validate()

    def test_calibrated_mode_supplies_its_own_lights(self):
        cfg = load_config(overrides={"mode": "calibrated", "le": False, "calibrated_light": "bin_center"})
        assert cfg.ablation.calibrated and cfg.ablation.ar and cfg.ablation.ir
        with pytest.raises(ConfigError):
            AblationConfig(le=False, ar=False, pe=True, mode="calibrated").validate()
