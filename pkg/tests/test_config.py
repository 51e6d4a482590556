import pytest

from tabparse.config import ModelConfig, SynthConfig, TrainConfig, load_config
from tabparse.errors import ConfigError, ValidationError
from tabparse.validators import validate_config, validate_model_config, validate_synth_config, validate_train_config


@pytest.fixture
def config_file(tmp_path):
    def write(text):
        path = tmp_path / "train.env"
        path.write_text(text)
        return str(path)
    return write


def test_defaults_load_clean(monkeypatch):
    monkeypatch.delenv("TABPARSE_ITERATIONS", raising=False)
    assert load_config(TrainConfig) == TrainConfig()
    assert load_config(SynthConfig) == SynthConfig()


def test_file_then_env_then_overrides(monkeypatch, config_file):
    path = config_file("iterations=300\ndecay_steps=100,200\nscales=256,320\nrotate=true\nbase_lr=0.01\n")
    config = load_config(TrainConfig, path)
    assert config.iterations == 300
    assert config.decay_steps == (100, 200)
    assert config.scales == (256, 320)
    assert config.rotate is True

    monkeypatch.setenv("TABPARSE_BASE_LR", "0.02")
    assert load_config(TrainConfig, path).base_lr == 0.02
    assert load_config(TrainConfig, path, {"base_lr": 0.05, "seed": None}).base_lr == 0.05


def test_unknown_key_is_named(config_file):
    path = config_file("iterations=300\nlearning_rate=0.1\n")
    with pytest.raises(ConfigError) as info:
        load_config(TrainConfig, path)
    assert info.value.message == f"Unknown config key 'learning_rate' in {path}."
    assert info.value.details == [{"field": "learning_rate", "reason": "unknown_key"}]
    assert isinstance(info.value, ValidationError)
    assert info.value.to_payload()["error"]["code"] == "CONFIG_ERROR"


def test_bad_values(config_file):
    with pytest.raises(ConfigError) as info:
        load_config(TrainConfig, config_file("iterations=many\n"))
    assert info.value.details == [{"field": "iterations", "reason": "invalid_value"}]

    with pytest.raises(ConfigError) as info:
        load_config(SynthConfig, None, {"max_rows": 13})
    assert {"field": "max_rows", "reason": "rows_must_be_within_2_12"} in info.value.details

    with pytest.raises(ConfigError):
        load_config(TrainConfig, config_file("rotate=maybe\n"))


def test_missing_file():
    with pytest.raises(ConfigError) as info:
        load_config(TrainConfig, "/nonexistent/train.env")
    assert info.value.details[0]["reason"] == "not_found"


def test_model_config_round_trip_and_checks():
    config = ModelConfig(kernel_width=5, grid_dim=64)
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"width": 3})
    assert validate_model_config(ModelConfig(kernel_width=4)) == [{"field": "kernel_width", "reason": "must_be_odd"}]
    assert validate_model_config(ModelConfig(backbone="vgg"))[0]["reason"] == "unknown_variant"
    assert validate_config(ModelConfig()) == []


def test_train_config_checks():
    assert validate_train_config(TrainConfig()) == []
    fields = {d["field"] for d in validate_train_config(TrainConfig(iterations=100, rotations=(45,), momentum=1.0))}
    assert fields == {"decay_steps", "rotations", "momentum"}
    assert validate_train_config(TrainConfig(decay_steps=(1800, 1400)))[0]["reason"] == "must_be_sorted"


def test_synth_config_checks():
    assert validate_synth_config(SynthConfig()) == []
    warp = validate_synth_config(SynthConfig(curve_amplitude=50.0, curve_wavelength=300.0))
    assert warp == [{"field": "curve_amplitude", "reason": "warp_not_invertible"}]
    assert validate_synth_config(SynthConfig(span_prob=1.5)) == [{"field": "span_prob", "reason": "out_of_range"}]
    assert validate_config(object()) == []


def test_model_config_from_train_config():
    config = TrainConfig(kernel_width=7, grid_dim=128, frcn_dim=256)
    assert config.model_config() == ModelConfig(kernel_width=7, grid_dim=128, frcn_dim=256)
