import numpy as np
import pytest

import flow
from config import TrainConfig
from dit import KeyTailorModel, frozen_checksum, parameter_checksum
from errors import DimensionError, NumericError, UsageError
from gradcheck import tiny_conditions
from numerics import SeededRng, Tensor, backward, no_grad


@pytest.fixture
def setup(tiny_cfg):
    model = KeyTailorModel(tiny_cfg)
    cond = tiny_conditions(SeededRng(0, "cond"), tiny_cfg)
    x1 = SeededRng(0, "x1").normal(cond.latent_shape)
    return model, cond, x1


def test_interpolation_endpoints(rng):
    x0 = Tensor(rng.normal((3, 4)))
    x1 = Tensor(rng.normal((3, 4)))
    np.testing.assert_allclose(flow.flow_interpolate(x0, x1, 0.0).data, x0.data)
    np.testing.assert_allclose(flow.flow_interpolate(x0, x1, 1.0).data, x1.data)
    mid = flow.flow_interpolate(x0, x1, 0.25).data
    np.testing.assert_allclose(mid, 0.25 * x1.data + 0.75 * x0.data, rtol=1e-6)


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_time_outside_unit_interval(t):
    x = Tensor(np.zeros(3))
    with pytest.raises(UsageError):
        flow.flow_interpolate(x, x, t)


def test_endpoint_shapes_must_agree():
    with pytest.raises(DimensionError):
        flow.flow_interpolate(Tensor(np.zeros(3)), Tensor(np.zeros(4)), 0.5)
    with pytest.raises(DimensionError):
        flow.target_velocity(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_path_derivative_is_target_velocity(rng):
    x0 = Tensor(rng.normal((5,), dtype=np.float64), dtype=np.float64)
    x1 = Tensor(rng.normal((5,), dtype=np.float64), dtype=np.float64)
    h = 1e-6
    slope = (flow.flow_interpolate(x0, x1, 0.4 + h).data - flow.flow_interpolate(x0, x1, 0.4 - h).data) / (2 * h)
    np.testing.assert_allclose(slope, flow.target_velocity(x0, x1).data, atol=1e-6)


def test_timesteps_are_logit_normal():
    rng = SeededRng(0, "timesteps")
    draws = np.array([flow.sample_timestep(rng) for _ in range(4000)])
    assert draws.min() > 0.0 and draws.max() < 1.0
    assert np.median(draws) == pytest.approx(0.5, abs=0.03)
    assert flow.timestep_from_normal(0.0) == 0.5


def test_fm_loss_gradient(rng):
    pred = Tensor(rng.normal((2, 3), dtype=np.float64), requires_grad=True, dtype=np.float64)
    target = Tensor(rng.normal((2, 3), dtype=np.float64), dtype=np.float64)
    loss = flow.fm_loss(pred, target)
    assert loss.item() == pytest.approx(np.mean((pred.data - target.data) ** 2))
    backward(loss)
    np.testing.assert_allclose(pred.grad, 2.0 * (pred.data - target.data) / 6.0, atol=1e-12)


@pytest.mark.parametrize("steps", [1, 5, 25])
def test_euler_matches_closed_form(steps):
    a = np.array([1.0, -2.0, 0.5])
    x0 = np.array([0.3, 0.1, -1.0])
    out = flow.denoise_fn(lambda x, t: a - x, a.shape, steps=steps, x0=x0)
    np.testing.assert_allclose(out, a + (x0 - a) * (1.0 - 1.0 / steps) ** steps, atol=1e-12)


@pytest.mark.parametrize("steps", [1, 5, 25])
def test_ideal_velocity_lands_on_data(steps):
    target = np.array([[0.7, -0.2], [1.5, 0.0]])
    out = flow.denoise_fn(lambda x, t: (target - x) / (1.0 - t), target.shape, steps=steps, seed=3)
    np.testing.assert_allclose(out, target, atol=1e-12)


def test_denoise_needs_a_step():
    with pytest.raises(UsageError):
        flow.denoise_fn(lambda x, t: x, (2,), steps=0)


def test_model_denoise_is_deterministic(setup):
    model, cond, _ = setup
    with no_grad():
        bundle = model.encode_conditions(cond)
    a = flow.denoise(model, bundle, steps=3, seed=5)
    b = flow.denoise(model, bundle, steps=3, seed=5)
    c = flow.denoise(model, bundle, steps=3, seed=6)
    assert a.shape == cond.latent_shape
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_zero_learning_rate_leaves_parameters(setup):
    model, cond, x1 = setup
    before = parameter_checksum(model)
    result = flow.fit(model, cond, x1, TrainConfig(lr=0.0, steps=2))
    assert parameter_checksum(model) == before
    assert result.steps == 2
    assert len(result.losses) == 2


def test_training_moves_only_trainable_parameters(setup):
    model, cond, x1 = setup
    frozen, full = frozen_checksum(model), parameter_checksum(model)
    flow.fit(model, cond, x1, TrainConfig(lr=1e-2, steps=2))
    assert frozen_checksum(model) == frozen
    assert parameter_checksum(model) != full


def test_default_schedule_keeps_frozen_weights(setup):
    model, cond, x1 = setup
    frozen = frozen_checksum(model)
    result = flow.fit(model, cond, x1, TrainConfig())
    assert result.steps == 200
    assert frozen_checksum(model) == frozen


def test_training_is_reproducible(tiny_cfg):
    cond = tiny_conditions(SeededRng(0, "cond"), tiny_cfg)
    x1 = SeededRng(0, "x1").normal(cond.latent_shape)
    runs = []
    for _ in range(2):
        model = KeyTailorModel(tiny_cfg)
        losses = flow.fit(model, cond, x1, TrainConfig(lr=1e-3, steps=3, seed=4)).losses
        runs.append((losses, parameter_checksum(model)))
    assert runs[0] == runs[1]


def test_non_finite_loss_restores_parameters(setup):
    model, cond, x1 = setup
    before = parameter_checksum(model)
    cond.garment_latent = np.full_like(cond.garment_latent, np.nan)
    with pytest.raises(NumericError):
        flow.fit(model, cond, x1, TrainConfig(lr=1e-2, steps=2))
    assert parameter_checksum(model) == before


def test_evaluate_loss_is_fixed(setup):
    model, cond, x1 = setup
    assert flow.evaluate_loss(model, cond, x1) == flow.evaluate_loss(model, cond, x1)


def test_train_streams_reproduce():
    a, b = flow.TrainStreams.from_seed(9), flow.TrainStreams.from_seed(9)
    assert flow.sample_timestep(a.timesteps) == flow.sample_timestep(b.timesteps)
    np.testing.assert_array_equal(a.noise.normal((3,)), b.noise.normal((3,)))
