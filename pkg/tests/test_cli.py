import pytest
import yaml
from typer.testing import CliRunner

import ktsr
from errors import ConfigurationError
from main import app, parse_seeds

runner = CliRunner()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    result = runner.invoke(app, ["gen-synthetic", "--seeds", "1..2", "--frames", "4", "--size", "32",
                                 "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_parse_seeds():
    assert parse_seeds("1..3") == [1, 2, 3]
    assert parse_seeds("3-5,9") == [3, 4, 5, 9]
    with pytest.raises(ConfigurationError):
        parse_seeds("5..2")
    with pytest.raises(ConfigurationError):
        parse_seeds("a,b")


def test_gen_synthetic_layout(corpus):
    assert sorted(p.name for p in corpus.iterdir() if p.is_dir()) == ["sample_0001", "sample_0002"]
    resolved = yaml.safe_load((corpus / "resolved_config.yaml").read_text())
    assert resolved["command"] == "gen-synthetic"
    assert resolved["corpus"]["seeds"] == [1, 2]
    assert ktsr.read_tensor(corpus / "sample_0001" / "video.ktsr").shape == (3, 4, 32, 32)


def test_gen_synthetic_rejects_small_size(tmp_path):
    result = runner.invoke(app, ["gen-synthetic", "--seeds", "1", "--size", "16", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_show_config_lists_defaults(tmp_path):
    result = runner.invoke(app, ["show-config", "--out", str(tmp_path)])
    assert result.exit_code == 0
    assert (tmp_path / "resolved_config.yaml").exists()
    for key in ("lambda", "alpha", "k_max", "inference_steps", "0.5", "0.3"):
        assert key in result.output


def test_sample_keyframes(corpus, tmp_path):
    result = runner.invoke(app, ["sample-keyframes", "--sample", str(corpus / "sample_0001"), "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "keyframes.tsv").exists()
    assert (tmp_path / "resolved_config.yaml").exists()


def test_sample_keyframes_mode_and_k_max(corpus, tmp_path):
    result = runner.invoke(app, ["sample-keyframes", "--video", str(corpus / "sample_0002"), "--mode", "eq1",
                                 "--k-max", "1", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    resolved = yaml.safe_load((tmp_path / "resolved_config.yaml").read_text())
    assert resolved["sampler"]["scoring_mode"] == "eq1"
    assert resolved["sampler"]["k_max"] == 1
    assert resolved["sampler"]["occlu_thres"] == 0.2


def test_missing_sample_is_io_error(tmp_path):
    result = runner.invoke(app, ["sample-keyframes", "--sample", str(tmp_path / "none"), "--out", str(tmp_path)])
    assert result.exit_code == 3


def test_exclusive_toggles_exit_with_config_error(corpus, tmp_path):
    result = runner.invoke(app, ["train", "--sample", str(corpus / "sample_0001"), "--no-cbdo", "--no-fusion",
                                 "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_config_file_with_unknown_key(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("sampler:\n  kmax: 3\n")
    result = runner.invoke(app, ["--config", str(path), "show-config", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_config_file_values_reach_the_run(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("sampler:\n  lambda: 0.8\n")
    result = runner.invoke(app, ["--config", str(path), "show-config", "--out", str(tmp_path)])
    assert result.exit_code == 0
    assert "0.8" in result.output


def test_eval_against_itself(corpus, tmp_path):
    sample = str(corpus / "sample_0002")
    result = runner.invoke(app, ["eval", "--generated", sample, "--reference", sample, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    summary = (tmp_path / "metrics.tsv").read_text().splitlines()[-1]
    assert "mean_ssim=1.000000" in summary


def test_eval_needs_both_videos(tmp_path):
    result = runner.invoke(app, ["eval", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_gradcheck_failure_exits_nonzero(tmp_path):
    result = runner.invoke(app, ["gradcheck", "--scope", "layer", "--seeds", "1", "--corrupt-gradient", "0.5",
                                 "--out", str(tmp_path)])
    assert result.exit_code == 4
    assert (tmp_path / "gradcheck.tsv").exists()


def test_gradcheck_unknown_scope(tmp_path):
    result = runner.invoke(app, ["gradcheck", "--scope", "galaxy", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert not (tmp_path / "resolved_config.yaml").exists()


def test_gradcheck_writes_report_and_resolved_step(tmp_path):
    result = runner.invoke(app, ["gradcheck", "--scope", "layer", "--seeds", "1", "--step", "5e-5",
                                 "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    resolved = yaml.safe_load((tmp_path / "resolved_config.yaml").read_text())
    assert resolved["gradcheck"] == {"scope": "layer", "seeds": 1, "step": 5e-5}
    assert (tmp_path / "gradcheck.tsv").exists()


@pytest.mark.slow
def test_train_and_infer_commands(corpus, tmp_path):
    sample = str(corpus / "sample_0001")
    tiny = tmp_path / "tiny.yaml"
    tiny.write_text(yaml.safe_dump({"model": {"blocks": 1, "width": 16, "heads": 2, "rank": 2, "latent_channels": 2,
                                              "ffn_mult": 2, "time_frequencies": 2,
                                              "guider_channels": [4, 4, 4, 4]}}))
    result = runner.invoke(app, ["--config", str(tiny), "train", "--sample", sample, "--steps", "2",
                                 "--out", str(tmp_path / "train")])
    assert result.exit_code == 0, result.output
    checkpoint = tmp_path / "train" / "checkpoint.ktckpt"
    assert checkpoint.exists()
    result = runner.invoke(app, ["--config", str(tiny), "infer", "--checkpoint", str(checkpoint), "--sample", sample,
                                 "--steps", "2", "--out", str(tmp_path / "infer")])
    assert result.exit_code == 0, result.output
    assert ktsr.read_tensor(tmp_path / "infer" / "frames.ktsr").shape == (3, 4, 32, 32)
