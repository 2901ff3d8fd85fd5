import inspect

import pytest

import gradcheck
from config import CheckConfig
from errors import ConfigurationError


def test_layer_scope_passes():
    results = gradcheck.run_gradcheck("layer", seeds=2)
    assert results
    failed = [(r.name, r.seed, r.error) for r in results if not r.passed]
    assert not failed


def test_block_scope_passes():
    results = gradcheck.run_gradcheck("block", seeds=1)
    assert {r.name for r in results} == {"dit_block", "cross_attention", "guider", "gdde_distill", "fuse_guidance"}
    assert all(r.passed for r in results), [(r.name, r.error) for r in results]


@pytest.mark.slow
def test_model_scope_passes():
    results = gradcheck.run_gradcheck("model", seeds=1)
    assert {r.name for r in results} == {"model", "model_no_fusion", "model_default"}
    assert all(r.passed for r in results), [(r.name, r.error) for r in results]


def test_corrupted_gradients_are_caught():
    results = gradcheck.run_gradcheck("layer", seeds=1, corrupt=0.5)
    assert not any(r.passed for r in results)


def test_step_defaults_and_is_honored():
    assert inspect.signature(gradcheck.run_gradcheck).parameters["h"].default == CheckConfig().step == 1e-4
    coarse = {r.name: r for r in gradcheck.run_gradcheck("layer", seeds=1, h=1.0)}
    assert coarse["add"].passed
    assert not coarse["gelu"].passed


def test_unknown_scope():
    with pytest.raises(ConfigurationError):
        gradcheck.run_gradcheck("network")


def test_report(tmp_path):
    results = gradcheck.run_gradcheck("layer", seeds=1)
    lines = gradcheck.write_gradcheck_report(tmp_path / "g.tsv", results).read_text().splitlines()
    assert lines[0] == "scope\tcase\tseed\terror\ttolerance\tpassed"
    assert len(lines) == 1 + len(results)
    assert all(line.endswith("\t1") for line in lines[1:])
