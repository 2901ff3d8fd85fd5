from dataclasses import replace

import numpy as np
import pytest

import ktsr
import pipeline
from config import AblationConfig, SamplerConfig
from dit import parameter_checksum
from errors import StorageError
from numerics import SeededRng, Tensor, no_grad
from synth import write_sample


@pytest.fixture(scope="session")
def sample_dir(small_sample, tmp_path_factory):
    return write_sample(small_sample, tmp_path_factory.mktemp("corpus") / "sample_0007")


@pytest.fixture
def run(tiny_run, sample_dir):
    return tiny_run.model_copy(update={"sample": sample_dir})


def with_toggle(run, toggle):
    return run.model_copy(update={"ablation": AblationConfig(**{toggle: True})})


def test_no_sr_drops_instruction_and_ratio_terms():
    cfg = pipeline.sampler_for(SamplerConfig(), AblationConfig(no_sr=True))
    assert (cfg.w1, cfg.w2, cfg.w3, cfg.w4, cfg.lambda_) == (0.0, 0.2, 0.0, 0.2, 0.0)
    assert pipeline.sampler_for(SamplerConfig(), AblationConfig()) == SamplerConfig()


def test_keyframe_strategies(small_sample, run):
    _, chosen = pipeline.choose_keyframes(small_sample, run)
    assert 1 <= len(chosen) <= 3
    assert chosen.strategy in ("instruction", "fallback")
    _, first = pipeline.choose_keyframes(small_sample, with_toggle(run, "keyframes_1"))
    assert first.indices == [0]
    _, rand_a = pipeline.choose_keyframes(small_sample, with_toggle(run, "no_iks"))
    _, rand_b = pipeline.choose_keyframes(small_sample, with_toggle(run, "no_iks"))
    assert rand_a.strategy == "random"
    assert rand_a.indices == rand_b.indices


def test_fully_occluded_sample_falls_back_to_first_frame(small_sample, run):
    frames = [replace(f, occluded_garment_mask=f.garment_mask) for f in small_sample.frames]
    occluded = replace(small_sample, frames=frames)
    _, keyframes = pipeline.choose_keyframes(occluded, run)
    assert keyframes.indices == [0]
    assert keyframes.strategy == "fallback"
    assert keyframes.status == "empty"


def test_prepare_conditions(small_sample, run):
    _, keyframes = pipeline.choose_keyframes(small_sample, run)
    encoder = pipeline.build_encoder(run)
    cond = pipeline.prepare_conditions(small_sample, keyframes, encoder, run)
    c = run.model.latent_channels
    assert cond.latent_shape == (c, 2, 4, 4)
    assert cond.mask_latent.shape == (1, 2, 4, 4)
    assert len(cond.keyframe_latents) == len(keyframes)
    assert cond.background_index in keyframes.indices
    assert pipeline.target_latent(small_sample, encoder).shape == cond.latent_shape
    skipped = pipeline.prepare_conditions(small_sample, keyframes, encoder, with_toggle(run, "no_keybg"))
    assert skipped.key_background is None


@pytest.mark.parametrize("toggle", sorted(pipeline.DECLARED_PATHS))
def test_ablation_changes_only_declared_roles(small_sample, run, toggle):
    result = pipeline.audit_ablation(small_sample, run, toggle)
    assert result.ok, result.changed


@pytest.mark.parametrize("toggle, roles", [
    ("no_qkey", {"keyframe_mean"}),
    ("no_cbdo", {"background"}),
    ("no_gdde", {"garment", "keyframe_mean"}),
    ("no_fusion", {"background", "extra"}),
])
def test_ablation_reroutes_its_path(small_sample, run, toggle, roles):
    assert set(pipeline.audit_ablation(small_sample, run, toggle).changed) == roles


def test_activation_diff_marks_missing_roles(small_sample, run):
    encoder = pipeline.build_encoder(run)
    full = pipeline._bundle_for(small_sample, run, encoder)
    assert pipeline.activation_diff(full, full) == {}
    without = pipeline._bundle_for(small_sample, with_toggle(run, "no_qkey"), encoder)
    assert pipeline.activation_diff(full, without) == {"keyframe_mean": float("inf")}


def test_train_then_infer_round_trip(run, tmp_path):
    outputs = pipeline.run_training(run, tmp_path / "train")
    assert outputs.checkpoint.exists()
    assert outputs.initial_checksum != outputs.final_checksum
    lines = outputs.loss_log.read_text().splitlines()
    assert lines[0] == "step\tloss"
    assert len(lines) == 1 + run.train.steps

    trained = run.model_copy(update={"checkpoint": outputs.checkpoint})
    model = pipeline.build_model(trained, outputs.checkpoint)
    assert parameter_checksum(model) == outputs.final_checksum

    first = pipeline.run_inference(trained, tmp_path / "a")
    second = pipeline.run_inference(trained, tmp_path / "b")
    a, b = ktsr.read_tensor(first), ktsr.read_tensor(second)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 8, 32, 32)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert (tmp_path / "a" / pipeline.LATENT_NAME).exists()
    assert (tmp_path / "a" / pipeline.KEYFRAMES_NAME).exists()


def test_inference_seed_changes_output(run, tmp_path):
    a = ktsr.read_tensor(pipeline.run_inference(run, tmp_path / "a"))
    b = ktsr.read_tensor(pipeline.run_inference(run.model_copy(update={"seed": 1}), tmp_path / "b"))
    assert not np.array_equal(a, b)


def test_eval_of_sample_against_itself(sample_dir, tmp_path):
    report = pipeline.run_eval(sample_dir, sample_dir, tmp_path, show=False)
    assert report.mean_ssim == pytest.approx(1.0)
    assert (tmp_path / pipeline.METRICS_NAME).exists()


def test_keyframe_and_score_reports(run, tmp_path):
    keyframes = pipeline.run_sample_keyframes(run, tmp_path, show=False)
    scores = pipeline.run_score_frames(run, tmp_path, show=False)
    assert len(scores) == 8
    report = (tmp_path / pipeline.KEYFRAMES_NAME).read_text().splitlines()
    assert report[-1].endswith("selected=" + ",".join(map(str, keyframes.indices)))
    assert (tmp_path / pipeline.SCORES_NAME).read_text().splitlines()[-1].startswith("# status=unselected")


def test_missing_sample_flag(tiny_run, tmp_path):
    with pytest.raises(StorageError):
        pipeline.run_sample_keyframes(tiny_run, tmp_path, show=False)


def test_ablation_echo_table(run, tmp_path):
    run = run.model_copy(update={"train": run.train.model_copy(update={"steps": 1, "inference_steps": 1})})
    rows = pipeline.run_ablation_echo(run, tmp_path)
    assert [name for name, _ in rows] == ["full", "no_cbdo", "no_gdde", "keyframes_1"]
    lines = (tmp_path / pipeline.ECHO_NAME).read_text().splitlines()
    assert lines[0] == "variant\tssim\teval_loss\tordered"
    assert len(lines) == 5


def test_loaded_checkpoint_matches_trained_model(run, small_sample, tmp_path):
    outputs = pipeline.run_training(run, tmp_path / "train")
    loaded = pipeline.build_model(run, outputs.checkpoint)
    for (name, a), (_, b) in zip(outputs.model.named_parameters(), loaded.named_parameters()):
        assert a.trainable == b.trainable, name
        assert np.array_equal(a.data, b.data), name

    encoder = pipeline.build_encoder(run)
    _, keyframes = pipeline.choose_keyframes(small_sample, run)
    cond = pipeline.prepare_conditions(small_sample, keyframes, encoder, run)
    x_t = SeededRng(3, "x").normal(cond.latent_shape)
    with no_grad():
        for t in (0.0, 0.5, 0.9):
            expected = outputs.model.velocity(outputs.model.encode_conditions(cond), Tensor(x_t), t).data
            actual = loaded.velocity(loaded.encode_conditions(cond), Tensor(x_t), t).data
            assert np.array_equal(expected, actual), t
    np.testing.assert_array_equal(pipeline.infer_latent(outputs.model, cond, 2, seed=5),
                                  pipeline.infer_latent(loaded, cond, 2, seed=5))
