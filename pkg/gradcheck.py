"""
Finite-difference gradient suites at three scopes.

layer: every differentiable primitive and conditioning op, 20 seeds, 1e-4.
block: DiT block, guider, distillation and fusion sub-graphs, 5 seeds, 1e-3.
model: the flow-matching loss of a tiny full model and of the default
architecture w.r.t. every trainable tensor, 5 seeds, 1e-3.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from config import AblationConfig, ModelConfig
from dit import (CrossAttention, DiTBlock, KeyAdapter, KeyTailorModel, LoraAdapter, cross_attention_garment,
                 keyframe_query_bias, lora_linear)
from errors import ConfigurationError, StorageError
from flow import flow_loss
from latents import (DistillComponent, FusionProjection, GuiderNet, SampleConditions, cbdo_fuse, fuse_guidance,
                     gdde_distill, mean_latent)
from numerics import SeededRng, Tensor, finite_diff_check, no_grad, precision

logger = logging.getLogger(__name__)

SCOPES = ("layer", "block", "model")
TOLERANCE = {"layer": 1e-4, "block": 1e-3, "model": 1e-3}
DEFAULT_SEEDS = {"layer": 20, "block": 5, "model": 5}
MAX_ENTRIES = {"layer": 24, "block": 16, "model": 8}
REPORT_NAME = "gradcheck.tsv"

Case = Tuple[Callable[..., Tensor], List[Tensor]]


@dataclass
class CheckResult:
    scope: str
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(blocks=1, width=16, heads=2, rank=2, latent_channels=2, ffn_mult=2, time_frequencies=2,
                  guider_channels=(4, 4, 4, 4))
    values.update(overrides)
    return ModelConfig(**values)


def _leaf(rng: SeededRng, shape, std: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape, std=std, dtype=np.float64), dtype=np.float64)


def _projected(op: Callable[..., Tensor], inputs: Sequence[Tensor], rng: SeededRng) -> Callable[..., Tensor]:
    """Reduce ``op`` to a scalar through a fixed random projection."""
    with no_grad():
        shape = op(*inputs).shape
    weights = _leaf(rng.child("projection"), shape)
    return lambda *xs: nx.sum(nx.mul(op(*xs), weights))


def _randomize(module: nx.Module, rng: SeededRng, std: float = 0.1):
    """Fill zero-initialized trainable tensors so every gradient path is live."""
    for name, p in module.named_parameters():
        if p.trainable and not p.data.any():
            p.data = rng.child(name).normal(p.shape, std=std, dtype=np.float64)


# Layer scope

def _layer_cases(rng: SeededRng) -> Dict[str, Case]:
    r = rng.child
    cases: Dict[str, Case] = {}

    def case(name, op, *inputs):
        cases[name] = (_projected(op, inputs, r(name)), list(inputs))

    case("add", nx.add, _leaf(r("a"), (3, 4)), _leaf(r("b"), (4,)))
    case("sub", nx.sub, _leaf(r("a"), (3, 4)), _leaf(r("b"), (3, 1)))
    case("mul", nx.mul, _leaf(r("a"), (2, 3, 4)), _leaf(r("b"), (3, 4)))
    case("scale", lambda x: nx.scale(x, -1.7), _leaf(r("x"), (5,)))
    case("gelu", nx.gelu, _leaf(r("x"), (4, 5)))
    case("sum", lambda x: nx.sum(x, axis=1), _leaf(r("x"), (3, 4, 2)))
    case("mean", lambda x: nx.mean(x, axis=(0, 2), keepdims=True), _leaf(r("x"), (3, 4, 2)))
    case("reshape", lambda x: nx.reshape(x, (6, 4)), _leaf(r("x"), (2, 3, 4)))
    case("permute", lambda x: nx.permute(x, (2, 0, 1)), _leaf(r("x"), (2, 3, 4)))
    case("concat", lambda a, b: nx.concat([a, b], axis=1), _leaf(r("a"), (2, 3)), _leaf(r("b"), (2, 2)))
    case("broadcast_to", lambda x: nx.broadcast_to(x, (3, 2, 4)), _leaf(r("x"), (2, 1)))
    case("matmul", nx.matmul, _leaf(r("a"), (2, 3, 4)), _leaf(r("b"), (2, 4, 5)))
    case("softmax", lambda x: nx.softmax(x, axis=-1), _leaf(r("x"), (3, 5)))
    case("layernorm", nx.layernorm, _leaf(r("x"), (3, 6)), _leaf(r("g"), (6,)), _leaf(r("b"), (6,)))
    case("linear", nx.linear, _leaf(r("x"), (4, 5)), _leaf(r("w"), (3, 5)), _leaf(r("b"), (3,)))
    case("conv1x1", nx.conv1x1, _leaf(r("x"), (3, 2, 2, 2)), _leaf(r("w"), (4, 3)), _leaf(r("b"), (4,)))
    case("conv3d", lambda x, w, b: nx.conv3d(x, w, b, stride=(1, 2, 2)),
         _leaf(r("x"), (2, 3, 4, 4)), _leaf(r("w"), (3, 2, 3, 3, 3), 0.3), _leaf(r("b"), (3,)))
    case("conv3d_stride2", lambda x, w: nx.conv3d(x, w, stride=(2, 2, 2)),
         _leaf(r("x"), (1, 3, 4, 4)), _leaf(r("w"), (2, 1, 3, 3, 3), 0.3))
    case("attention", lambda q, k, v: nx.attention(q, k, v, heads=2),
         _leaf(r("q"), (5, 4)), _leaf(r("k"), (3, 4)), _leaf(r("v"), (3, 6)))
    case("patchify", lambda x: nx.patchify(x, (1, 2, 2)), _leaf(r("x"), (2, 2, 4, 4)))
    case("unpatchify", lambda x: nx.unpatchify(x, (2, 2, 4, 4), (1, 2, 2)), _leaf(r("x"), (8, 8)))
    case("pixel_shuffle", lambda x: nx.pixel_shuffle(x, 2), _leaf(r("x"), (8, 1, 2, 3)))
    case("mse_loss", nx.mse_loss, _leaf(r("a"), (3, 4)), _leaf(r("b"), (3, 4)))

    adapter = LoraAdapter(3, 5, 2, r("lora"))
    adapter.A.data = adapter.A.data.astype(np.float64)
    adapter.B.data = r("lora_b").normal(adapter.B.shape, dtype=np.float64)
    case("lora_linear", lambda x, w, *_: lora_linear(x, w, adapter),
         _leaf(r("x"), (4, 5)), _leaf(r("w"), (3, 5)), adapter.A, adapter.B)

    key = KeyAdapter(6, 2, 2, r("key"))
    key.A.data = key.A.data.astype(np.float64)
    key.B.data = r("key_b").normal(key.B.shape, dtype=np.float64)
    case("keyframe_query_bias", lambda m, *_: keyframe_query_bias(m, key),
         _leaf(r("m"), (2, 3, 3)), key.A, key.B)

    case("mean_latent", lambda a, b, c: mean_latent([a, b, c]),
         _leaf(r("a"), (2, 2, 2)), _leaf(r("b"), (2, 2, 2)), _leaf(r("c"), (2, 2, 2)))
    case("cbdo_fuse", lambda bg, key_bg: cbdo_fuse(bg, key_bg, 0.3),
         _leaf(r("bg"), (2, 3, 2, 2)), _leaf(r("key"), (2, 2, 2)))
    return cases


# Block scope

def _block_cases(rng: SeededRng) -> Dict[str, Case]:
    cfg = tiny_model_config(seed=int(rng.seed))
    r = rng.child
    cases: Dict[str, Case] = {}

    with precision(np.float64):
        block = DiTBlock(cfg, r("block")).astype(np.float64)
        _randomize(block, r("block_init"))
        h, garment, keys = _leaf(r("h"), (6, cfg.width)), _leaf(r("g"), (4, 2)), _leaf(r("k"), (2, 2, 2))
        params = block.trainable_parameters()
        cases["dit_block"] = (_projected(lambda x, *_: block(x, garment, keys), [h] + params, r("p1")), [h] + params)

        cross = CrossAttention(cfg, r("cross")).astype(np.float64)
        _randomize(cross, r("cross_init"))
        tokens, latent = _leaf(r("t"), (5, cfg.width)), _leaf(r("l"), (2, 2, 2))
        params = cross.trainable_parameters()
        cases["cross_attention"] = (_projected(lambda t, l, *_: cross_attention_garment(t, l, cross),
                                           [tokens, latent] + params, r("p2")), [tokens, latent] + params)

        guider = GuiderNet(2, r("guider"), (4, 4, 4, 4)).astype(np.float64)
        _randomize(guider, r("guider_init"))
        video = Tensor(r("v").uniform(0.0, 1.0, (3, 4, 16, 16)), dtype=np.float64)
        params = guider.trainable_parameters()
        cases["guider"] = (_projected(lambda v, *_: guider(v), [video] + params, r("p3")), [video] + params)

        distill = DistillComponent(2).astype(np.float64)
        g, k1, k2 = _leaf(r("dg"), (2, 2, 2)), _leaf(r("k1"), (2, 2, 2)), _leaf(r("k2"), (2, 2, 2))
        params = distill.trainable_parameters()
        cases["gdde_distill"] = (_projected(lambda a, b, c, *_: gdde_distill(a, [b, c], distill),
                                        [g, k1, k2] + params, r("p4")), [g, k1, k2] + params)

        projection = FusionProjection(3, 2, 3).astype(np.float64)
        projection.weight.data = projection.weight.data + r("proj").normal(projection.weight.shape, std=0.1,
                                                                         dtype=np.float64)
        pose, mask = _leaf(r("pose"), (2, 1, 2, 2)), _leaf(r("mask"), (1, 1, 2, 2))
        gl, noise, bg = _leaf(r("gl"), (2, 2, 2)), _leaf(r("noise"), (2, 1, 2, 2)), _leaf(r("bg"), (2, 1, 2, 2))
        inputs = [pose, mask, gl, noise, bg, projection.weight]
        cases["fuse_guidance"] = (_projected(lambda p, m, g_, n, b, *_: fuse_guidance(p, m, g_, n, b, projection),
                                         inputs, r("p5")), inputs)
    return cases


# Model scope

def tiny_conditions(rng: SeededRng, cfg: ModelConfig, frames: int = 4, size: int = 16) -> SampleConditions:
    c, grid = cfg.latent_channels, size // 8
    t_latent = -(-frames // 4)
    return SampleConditions(
        pose_video=rng.child("pose").uniform(0.0, 1.0, (3, frames, size, size)),
        agnostic_video=rng.child("agnostic").uniform(0.0, 1.0, (3, frames, size, size)),
        mask_latent=rng.child("mask").uniform(0.0, 1.0, (1, t_latent, grid, grid)),
        garment_latent=rng.child("garment").normal((c, grid, grid), dtype=np.float64),
        reference_latent=rng.child("reference").normal((c, grid, grid), dtype=np.float64),
        keyframe_latents=[rng.child(f"key{i}").normal((c, grid, grid), dtype=np.float64) for i in range(2)],
        key_background=rng.child("key_bg").normal((c, grid, grid), dtype=np.float64),
        frames=frames,
    )


def _model_case(rng: SeededRng, ablation: AblationConfig, cfg: ModelConfig) -> Case:
    with precision(np.float64):
        model = KeyTailorModel(cfg, ablation).astype(np.float64)
        _randomize(model, rng.child("init"))
        cond = tiny_conditions(rng.child("cond"), cfg)
        shape = (cfg.latent_channels, 1, 2, 2)
        x1 = _leaf(rng.child("x1"), shape)
        x0 = _leaf(rng.child("x0"), shape)
    t = float(rng.child("t").uniform(0.05, 0.9))
    params = model.trainable_parameters()

    def loss(*_):
        return flow_loss(model, model.encode_conditions(cond), x1, x0, t)

    return loss, params


def _model_cases(rng: SeededRng) -> Dict[str, Case]:
    seed = int(rng.seed)
    return {
        "model": _model_case(rng.child("full"), AblationConfig(), tiny_model_config(seed=seed)),
        "model_no_fusion": _model_case(rng.child("no_fusion"), AblationConfig(no_fusion=True),
                                       tiny_model_config(seed=seed)),
        # default architecture: 2 blocks, width 64, 4 heads, rank 4
        "model_default": _model_case(rng.child("default"), AblationConfig(), ModelConfig(seed=seed)),
    }


SUITES = {"layer": _layer_cases, "block": _block_cases, "model": _model_cases}


def run_gradcheck(scope: str, seeds: Optional[int] = None, corrupt: float = 0.0,
                  h: float = 1e-4) -> List[CheckResult]:
    """
    Run every case of ``scope`` for ``seeds`` seeds.

    Args:
        corrupt: test hook, scales every analytic gradient by (1 + corrupt)
        h: central-difference step
    """
    if scope not in SCOPES:
        raise ConfigurationError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    seeds = DEFAULT_SEEDS[scope] if seeds is None else seeds
    results = []
    for seed in range(seeds):
        rng = SeededRng(seed, f"gradcheck/{scope}")
        for name, (f, inputs) in SUITES[scope](rng).items():
            error = finite_diff_check(f, inputs, h=h, max_entries=MAX_ENTRIES[scope],
                                      rng=rng.child(name), corrupt=corrupt)
            results.append(CheckResult(scope, name, seed, error, TOLERANCE[scope]))
            if not results[-1].passed:
                logger.warning(f"gradcheck {scope}/{name} seed {seed}: error {error:.3e} "
                               f">= {TOLERANCE[scope]:.0e}")
    failed = sum(not r.passed for r in results)
    logger.info(f"gradcheck {scope}: {len(results) - failed}/{len(results)} checks passed")
    return results


def write_gradcheck_report(path: Path, results: Sequence[CheckResult]) -> Path:
    lines = ["scope\tcase\tseed\terror\ttolerance\tpassed"]
    lines += [f"{r.scope}\t{r.name}\t{r.seed}\t{r.error:.3e}\t{r.tolerance:.0e}\t{int(r.passed)}" for r in results]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path
