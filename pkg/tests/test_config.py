import pytest
import yaml

import config
from config import AblationConfig, ModelConfig, RunConfig, SamplerConfig, TrainConfig
from errors import ConfigurationError


def test_published_defaults():
    sampler, model, train = SamplerConfig(), ModelConfig(), TrainConfig()
    assert sampler.lambda_ == 0.5
    assert model.alpha == 0.3
    assert sampler.k_max == 3
    assert sampler.clarity_threshold == 50.0
    assert sampler.occlu_thres == 0.2
    assert (sampler.w1, sampler.w2, sampler.w3, sampler.w4) == (0.3, 0.2, 0.3, 0.2)
    assert sampler.score_diff_min == 0.1
    assert train.inference_steps == 25
    assert train.lr == 1e-4
    assert train.batch_size == 1


def test_defaults_table_matches_models():
    table = {key: value for key, value, _ in config.DEFAULTS_TABLE}
    assert table["sampler.lambda"] == SamplerConfig().lambda_
    assert table["model.alpha"] == ModelConfig().alpha
    assert table["train.lr"] == TrainConfig().lr
    assert all(origin for _, _, origin in config.DEFAULTS_TABLE)
    origins = {key: origin for key, _, origin in config.DEFAULTS_TABLE}
    assert "garment-ratio term S_r" in origins["sampler.lambda"]


def test_lambda_alias():
    assert SamplerConfig(**{"lambda": 0.7}).lambda_ == 0.7


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        ModelConfig(width=64, heads=5)


def test_width_must_exceed_token_width():
    with pytest.raises(ValueError):
        ModelConfig(latent_channels=16, width=32, heads=4)


@pytest.mark.parametrize("toggles", [
    {"no_cbdo": True, "no_fusion": True},
    {"no_gdde": True, "no_distill": True},
    {"no_iks": True, "keyframes_1": True},
])
def test_exclusive_ablations(toggles):
    with pytest.raises(ValueError):
        AblationConfig(**toggles)


def test_active_ablations():
    assert AblationConfig(no_qkey=True, no_iks=True).active() == ["no_iks", "no_qkey"]


def test_resolve_precedence(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"train": {"steps": 7, "lr": 0.5}, "sampler": {"k_max": 2}}))
    run = config.resolve_run_config("train", path, {"train": {"lr": 0.25, "steps": None}})
    assert run.train.steps == 7
    assert run.train.lr == 0.25
    assert run.sampler.k_max == 2
    assert run.command == "train"


def test_resolve_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  momentum: 3\n")
    with pytest.raises(ConfigurationError):
        config.resolve_run_config("train", path)


def test_resolve_rejects_exclusive_toggles():
    with pytest.raises(ConfigurationError):
        config.resolve_run_config("train", None, {"ablation": {"no_cbdo": True, "no_keybg": True}})


def test_resolved_config_round_trip(tmp_path):
    run = RunConfig(command="infer", seed=3, ablation=AblationConfig(no_qkey=True))
    path = config.write_resolved_config(run, tmp_path)
    assert path.name == "resolved_config.yaml"
    data = yaml.safe_load(path.read_text())
    assert data["sampler"]["lambda"] == 0.5
    assert RunConfig.model_validate(data) == run


def test_fingerprint_tracks_model_config():
    assert config.config_fingerprint(ModelConfig()) == config.config_fingerprint(ModelConfig())
    assert config.config_fingerprint(ModelConfig()) != config.config_fingerprint(ModelConfig(rank=2))


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("KEYTAILOR_THREADS", "3")
    assert config.get_settings().threads == 3
    monkeypatch.setenv("KEYTAILOR_THREADS", "0")
    with pytest.raises(ConfigurationError):
        config.get_settings()
