"""
Flow matching: interpolation path, velocity target, training loop and the
Euler sampler.

Convention: x0 is Gaussian noise, x1 is the clean latent, t runs from 0
(noise) to 1 (data) and x_t = t·x1 + (1 − t)·x0.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import TrainConfig
from dit import KeyTailorModel
from errors import DimensionError, NumericError, UsageError
from latents import LatentBundle, SampleConditions
from numerics import AdamW, SeededRng, Tensor, add, backward, mse_loss, no_grad, scale, sub

logger = logging.getLogger(__name__)

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def _check_t(t: float):
    if not 0.0 <= t <= 1.0 or math.isnan(t):
        raise UsageError(f"flow time t={t} is outside [0, 1]")


def flow_interpolate(x0: Tensor, x1: Tensor, t: float) -> Tensor:
    """x_t = t·x1 + (1 − t)·x0"""
    _check_t(t)
    if x0.shape != x1.shape:
        raise DimensionError(f"flow endpoints differ in shape: {x0.shape} vs {x1.shape}")
    return add(scale(x1, t), scale(x0, 1.0 - t))


def target_velocity(x0: Tensor, x1: Tensor) -> Tensor:
    if x0.shape != x1.shape:
        raise DimensionError(f"flow endpoints differ in shape: {x0.shape} vs {x1.shape}")
    return sub(x1, x0)


def timestep_from_normal(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def sample_timestep(rng: SeededRng) -> float:
    """Logit-normal draw: sigmoid of a standard normal."""
    return timestep_from_normal(rng.standard_normal())


def fm_loss(pred_velocity: Tensor, target: Tensor) -> Tensor:
    return mse_loss(pred_velocity, target)


# Training

@dataclass
class TrainStreams:
    """Independent seeded streams for timesteps and noise."""

    timesteps: SeededRng
    noise: SeededRng

    @classmethod
    def from_seed(cls, seed: int) -> "TrainStreams":
        root = SeededRng(seed, "train")
        return cls(root.child("timestep"), root.child("noise"))


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    initial_eval: float = float("nan")
    final_eval: float = float("nan")
    steps: int = 0


def make_optimizer(model: KeyTailorModel, cfg: TrainConfig) -> AdamW:
    return AdamW(model.trainable_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                 weight_decay=cfg.weight_decay)


def flow_loss(model: KeyTailorModel, bundle: LatentBundle, x1: Tensor, x0: Tensor, t: float) -> Tensor:
    x_t = flow_interpolate(x0, x1, t)
    return fm_loss(model.velocity(bundle, x_t, t), target_velocity(x0, x1))


def train_step(model: KeyTailorModel, cond: SampleConditions, x1: np.ndarray, optimizer: AdamW,
               streams: TrainStreams) -> float:
    """
    One optimizer step on a single sample.

    The guiders are trainable, so the conditioning bundle is rebuilt from the
    precomputed inputs on every step.

    Returns:
        float: the flow-matching loss before the update

    Raises:
        NumericError: the loss is not finite; parameters are left untouched
    """
    optimizer.zero_grad()
    t = sample_timestep(streams.timesteps)
    x0 = Tensor(streams.noise.normal(x1.shape))
    bundle = model.encode_conditions(cond)
    loss = flow_loss(model, bundle, Tensor(x1), x0, t)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite flow-matching loss {value} at t={t:.4f}")
    backward(loss)
    optimizer.step()
    return value


def evaluate_loss(model: KeyTailorModel, cond: SampleConditions, x1: np.ndarray, draws: int = 4,
                  seed: int = 0) -> float:
    """Mean loss over a fixed set of (t, x0) draws, for comparing checkpoints."""
    rng = SeededRng(seed, "evaluate")
    total = 0.0
    with no_grad():
        bundle = model.encode_conditions(cond)
        for _ in range(draws):
            t = sample_timestep(rng)
            x0 = Tensor(rng.normal(x1.shape))
            total += flow_loss(model, bundle, Tensor(x1), x0, t).item()
    return total / draws


def _snapshot(model: KeyTailorModel) -> List[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: KeyTailorModel, snapshot: Sequence[np.ndarray]):
    for p, data in zip(model.parameters(), snapshot):
        p.data = data
        p.zero_grad()


def fit(model: KeyTailorModel, cond: SampleConditions, x1: np.ndarray, cfg: TrainConfig,
        on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """
    Run ``cfg.steps`` train steps.

    On a non-finite loss the parameters are rolled back to the last state
    that produced a finite loss and the NumericError is re-raised.
    """
    optimizer = make_optimizer(model, cfg)
    streams = TrainStreams.from_seed(cfg.seed)
    result = TrainResult(initial_eval=evaluate_loss(model, cond, x1, seed=cfg.seed))
    logger.info(f"Training {len(optimizer.params)} trainable tensors for {cfg.steps} steps "
                f"(lr={cfg.lr}, initial loss {result.initial_eval:.6f})")
    last_good = _snapshot(model)
    for step in range(1, cfg.steps + 1):
        try:
            loss = train_step(model, cond, x1, optimizer, streams)
        except NumericError:
            _restore(model, last_good)
            logger.error(f"Training aborted at step {step}; parameters restored to step {step - 1}")
            raise
        last_good = _snapshot(model)
        result.losses.append(loss)
        result.steps = step
        if on_step is not None:
            on_step(step, loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            logger.info(f"step {step}/{cfg.steps} loss {loss:.6f}")
    result.final_eval = evaluate_loss(model, cond, x1, seed=cfg.seed)
    logger.info(f"Training finished: eval loss {result.initial_eval:.6f} -> {result.final_eval:.6f}")
    return result


# Sampling

def denoise_fn(velocity: VelocityFn, shape: Tuple[int, ...], steps: int = 25, seed: int = 0,
               x0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Euler integration of dx/dt = u(x, t) from t = 0 to 1 with uniform steps.

    The start point is a seeded standard normal draw unless ``x0`` is given.
    Integration runs in float64.
    """
    if steps < 1:
        raise UsageError(f"denoise needs at least one step, got {steps}")
    x = np.array(x0, dtype=np.float64) if x0 is not None else initial_noise(shape, seed)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * np.asarray(velocity(x, k / steps), dtype=np.float64)
    return x


def initial_noise(shape: Tuple[int, ...], seed: int) -> np.ndarray:
    return SeededRng(seed, "denoise").normal(shape, dtype=np.float64)


def denoise(model: KeyTailorModel, bundle: LatentBundle, steps: int = 25, seed: int = 0) -> np.ndarray:
    """Sample a video latent [C, T', h, w] for the conditions in ``bundle``."""
    bundle = bundle.detached()
    shape = bundle.pose.shape

    def velocity(x: np.ndarray, t: float) -> np.ndarray:
        with no_grad():
            return model.velocity(bundle, Tensor(x), t).data

    logger.debug(f"Denoising latent {shape} in {steps} steps (seed {seed})")
    return denoise_fn(velocity, shape, steps, seed)
