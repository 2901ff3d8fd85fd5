"""
Toy diffusion transformer with LoRA-adapted attention and feed-forward layers.

The frozen base is a seeded stand-in for a pretrained backbone: guidance
tokens are embedded with orthonormal columns, residual branches start with
near-zero output projections, and the head reads the embedded leading token
columns back out. The network predicts the clean latent x̂1 and the velocity is
derived as (x̂1 − x_t) / max(1 − t, floor).

Only LoRA adapters, the keyframe query adapter, both guiders, ℛ and 𝒟 are
trainable; every base weight is frozen.
"""
import hashlib
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import ktsr
from config import AblationConfig, ModelConfig, config_fingerprint
from errors import DimensionError, FormatError, LoadError, StorageError
from latents import (DistillComponent, FusionProjection, GuiderNet, ImageEncoder, LatentBundle, SampleConditions,
                     cbdo_fuse, fuse_guidance, gdde_distill, mean_latent)
from numerics import (Module, Parameter, SeededRng, Tensor, add, attention, broadcast_to, gelu, layernorm, linear,
                      matmul, mean, orthogonal, patchify, reshape, scale, sub, transpose, unpatchify)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "KTCKPT 1"
OUTPUT_STD = 0.005


class LoraAdapter(Module):
    """ΔW = A·Bᵀ with A [d_out, r] ~ N(0, std²) and B [k_in, r] = 0."""

    def __init__(self, out_features: int, in_features: int, rank: int, rng: SeededRng, std: float = 0.02):
        self.rank = rank
        self.A = Parameter(rng.normal((out_features, rank), std=std))
        self.B = Parameter(np.zeros((in_features, rank)))

    def delta(self) -> np.ndarray:
        return self.A.data @ self.B.data.T


def lora_linear(x: Tensor, weight: Tensor, adapter: Optional[LoraAdapter], bias: Optional[Tensor] = None) -> Tensor:
    """x·W0ᵀ + (x·B)·Aᵀ without materializing ΔW."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"lora_linear: input {x.shape} does not match base weight {weight.shape}")
    out = linear(x, weight, bias)
    if adapter is not None:
        if adapter.B.shape[0] != weight.shape[1] or adapter.A.shape[0] != weight.shape[0]:
            raise DimensionError(f"adapter A {adapter.A.shape} / B {adapter.B.shape} do not fit {weight.shape}")
        out = add(out, matmul(matmul(x, adapter.B), transpose(adapter.A)))
    return out


class LoraLinear(Module):
    """Frozen base linear layer with a trainable low-rank adapter."""

    def __init__(self, in_features: int, out_features: int, rank: int, rng: SeededRng, std: float,
                 lora_std: float = 0.02, bias: bool = False):
        self.weight = Parameter(rng.normal((out_features, in_features), std=std), trainable=False)
        self.bias = Parameter(np.zeros(out_features), trainable=False) if bias else None
        self.adapter = LoraAdapter(out_features, in_features, rank, rng.child("lora"), std=lora_std)
        self.enabled = True

    def forward(self, x: Tensor) -> Tensor:
        return lora_linear(x, self.weight, self.adapter if self.enabled else None, self.bias)


class KeyAdapter(Module):
    """Keyframe query adapter (A_key [d, r], B_key [C, r])."""

    def __init__(self, width: int, channels: int, rank: int, rng: SeededRng, std: float = 0.02):
        self.A = Parameter(rng.normal((width, rank), std=std))
        self.B = Parameter(np.zeros((channels, rank)))


def keyframe_query_bias(keyframe_mean: Tensor, adapter: KeyAdapter) -> Tensor:
    """
    b = A_key·(B_keyᵀ·pooled), pooled = spatial mean of the mean keyframe
    garment latent [C, h, w]. Returned as [1, d] to broadcast over tokens.
    """
    c = keyframe_mean.shape[0]
    pooled = mean(reshape(keyframe_mean, (c, int(np.prod(keyframe_mean.shape[1:])))), axis=1)
    return matmul(matmul(reshape(pooled, (1, c)), adapter.B), transpose(adapter.A))


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = Parameter(np.ones(width), trainable=False)
        self.bias = Parameter(np.zeros(width), trainable=False)

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias)


class SelfAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        d, r = cfg.width, cfg.rank
        self.heads = cfg.heads
        self.q = LoraLinear(d, d, r, rng.child("q"), 1.0 / math.sqrt(d), cfg.lora_std)
        self.k = LoraLinear(d, d, r, rng.child("k"), 1.0 / math.sqrt(d), cfg.lora_std)
        self.v = LoraLinear(d, d, r, rng.child("v"), 1.0 / math.sqrt(d), cfg.lora_std)
        self.o = LoraLinear(d, d, r, rng.child("o"), OUTPUT_STD, cfg.lora_std)

    def forward(self, x: Tensor, query_bias: Optional[Tensor] = None) -> Tensor:
        q = self.q(x)
        if query_bias is not None:
            q = add(q, query_bias)
        return self.o(attention(q, self.k(x), self.v(x), self.heads))


class CrossAttention(Module):
    """Queries from the video tokens, keys and values from garment tokens."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        d, r = cfg.width, cfg.rank
        kv_in = cfg.latent_channels * cfg.patch[1] * cfg.patch[2]
        self.heads = cfg.heads
        self.q = LoraLinear(d, d, r, rng.child("q"), 1.0 / math.sqrt(d), cfg.lora_std)
        self.k = LoraLinear(kv_in, d, r, rng.child("k"), 1.0 / math.sqrt(kv_in), cfg.lora_std)
        self.v = LoraLinear(kv_in, d, r, rng.child("v"), 1.0 / math.sqrt(kv_in), cfg.lora_std)
        self.o = LoraLinear(d, d, r, rng.child("o"), OUTPUT_STD, cfg.lora_std)

    def forward(self, x: Tensor, garment_tokens: Tensor) -> Tensor:
        return self.o(attention(self.q(x), self.k(garment_tokens), self.v(garment_tokens), self.heads))


def cross_attention_garment(tokens: Tensor, garment: Tensor, layer: CrossAttention,
                            patch: Sequence[int] = (1, 1)) -> Tensor:
    """Cross-attention of ``tokens`` over the patchified garment latent [C, h, w]."""
    return layer(tokens, patchify(garment, patch))


class FeedForward(Module):
    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        d, hidden = cfg.width, cfg.width * cfg.ffn_mult
        self.up = LoraLinear(d, hidden, cfg.rank, rng.child("up"), 1.0 / math.sqrt(d), cfg.lora_std, bias=True)
        self.down = LoraLinear(hidden, d, cfg.rank, rng.child("down"), OUTPUT_STD, cfg.lora_std, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


class DiTBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        self.norm1 = LayerNorm(cfg.width)
        self.self_attn = SelfAttention(cfg, rng.child("self_attn"))
        self.key = KeyAdapter(cfg.width, cfg.latent_channels, cfg.rank, rng.child("key"), cfg.lora_std)
        self.norm2 = LayerNorm(cfg.width)
        self.cross_attn = CrossAttention(cfg, rng.child("cross_attn"))
        self.norm3 = LayerNorm(cfg.width)
        self.ffn = FeedForward(cfg, rng.child("ffn"))

    def forward(self, h: Tensor, garment_tokens: Tensor, keyframe_mean: Optional[Tensor] = None) -> Tensor:
        bias = keyframe_query_bias(keyframe_mean, self.key) if keyframe_mean is not None else None
        h = add(h, self.self_attn(self.norm1(h), bias))
        h = add(h, self.cross_attn(self.norm2(h), garment_tokens))
        return add(h, self.ffn(self.norm3(h)))


def timestep_features(t: float, frequencies: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features [2F] of t in [0, 1] (scaled to the usual 0..1000 range)."""
    freqs = np.exp(-math.log(max_period) * np.arange(frequencies) / frequencies)
    args = 1000.0 * t * freqs
    return np.concatenate([np.cos(args), np.sin(args)])


class DiT(Module):
    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        self.cfg = cfg
        p = cfg.patch[0] * cfg.patch[1] * cfg.patch[2]
        token_width = (2 * cfg.latent_channels + 1) * p
        out_width = cfg.latent_channels * p
        basis = orthogonal(rng.child("embed"), cfg.width)
        self.embed = Parameter(basis[:, :token_width], trainable=False)
        mixing = rng.child("time").normal((cfg.width - token_width, 2 * cfg.time_frequencies),
                                          std=0.5 / math.sqrt(2 * cfg.time_frequencies), dtype=np.float64)
        self.time_proj = Parameter(basis[:, token_width:] @ mixing, trainable=False)
        self.head = Parameter(basis[:, :out_width].T, trainable=False)
        self.blocks = [DiTBlock(cfg, rng.child(f"block{i}")) for i in range(cfg.blocks)]

    def forward(self, tokens: Tensor, garment_tokens: Tensor, t: float,
                keyframe_mean: Optional[Tensor] = None) -> Tensor:
        features = timestep_features(t, self.cfg.time_frequencies)
        time = self.time_proj.data @ features.astype(self.time_proj.dtype)
        h = add(linear(tokens, self.embed), Tensor(time[None], dtype=self.time_proj.dtype))
        for block in self.blocks:
            h = block(h, garment_tokens, keyframe_mean)
        return linear(h, self.head)


class KeyTailorModel(Module):
    """Guiders, distillation, fusion projection and the transformer, wired per the ablation toggles."""

    def __init__(self, cfg: ModelConfig, ablation: Optional[AblationConfig] = None):
        self.cfg = cfg
        self.ablation = ablation or AblationConfig()
        rng = SeededRng(cfg.seed, "model")
        c = cfg.latent_channels
        p = cfg.patch[0] * cfg.patch[1] * cfg.patch[2]
        self.pose_guider = GuiderNet(c, rng.child("pose_guider"), cfg.guider_channels)
        self.mask_guider = GuiderNet(c, rng.child("mask_guider"), cfg.guider_channels)
        self.distill = DistillComponent(c)
        in_width = (c + 1 + (c if self.ablation.no_fusion else 0)) * p
        self.projection = FusionProjection(in_width, c * p, (c + 1) * p)
        self.dit = DiT(cfg, rng.child("dit"))

    def set_adapters(self, enabled: bool):
        for block in self.dit.blocks:
            for layer in (block.self_attn.q, block.self_attn.k, block.self_attn.v, block.self_attn.o,
                          block.cross_attn.q, block.cross_attn.k, block.cross_attn.v, block.cross_attn.o,
                          block.ffn.up, block.ffn.down):
                layer.enabled = enabled

    def encode_conditions(self, cond: SampleConditions) -> LatentBundle:
        """Run the trainable conditioning branches and route latents per the ablations."""
        ab = self.ablation
        pose = self.pose_guider(Tensor(cond.pose_video))
        background = self.mask_guider(Tensor(cond.agnostic_video))
        mask = Tensor(cond.mask_latent)
        keys = [Tensor(k) for k in cond.keyframe_latents]

        keyframe_mean = None
        if ab.no_gdde:
            garment = Tensor(cond.reference_latent)
        elif ab.no_distill:
            garment = Tensor(cond.garment_latent)
            keyframe_mean = mean_latent(keys)
        else:
            garment = gdde_distill(Tensor(cond.garment_latent), keys, self.distill)
            keyframe_mean = mean_latent(keys)
        if ab.no_qkey:
            keyframe_mean = None

        extra = None
        if ab.no_cbdo or ab.no_keybg or cond.key_background is None:
            fused_background = background
        elif ab.no_fusion:
            fused_background = background
            c, t, h, w = background.shape
            extra = broadcast_to(reshape(Tensor(cond.key_background), (c, 1, h, w)), (c, t, h, w))
        else:
            fused_background = cbdo_fuse(background, Tensor(cond.key_background), self.cfg.alpha)
        return LatentBundle(garment=garment, background=fused_background, pose=pose, mask=mask,
                            keyframe_mean=keyframe_mean, extra=extra)

    def predict_clean(self, bundle: LatentBundle, x_t: Tensor, t: float) -> Tensor:
        cfg = self.cfg
        tokens = fuse_guidance(bundle.pose, bundle.mask, bundle.garment, x_t, bundle.background,
                               self.projection, cfg.patch, bundle.extra)
        garment_tokens = patchify(bundle.garment, cfg.patch[1:])
        out = self.dit(tokens, garment_tokens, t, bundle.keyframe_mean)
        return unpatchify(out, x_t.shape, cfg.patch)

    def velocity(self, bundle: LatentBundle, x_t: Tensor, t: float) -> Tensor:
        """u = (x̂1 − x_t) / max(1 − t, floor)."""
        x1_hat = self.predict_clean(bundle, x_t, t)
        return scale(sub(x1_hat, x_t), 1.0 / max(1.0 - t, self.cfg.velocity_floor))


def frozen_checksum(model: Module) -> str:
    """sha256 over the bytes of every frozen parameter, in parameter order."""
    digest = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.trainable:
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def parameter_checksum(model: Module) -> str:
    digest = hashlib.sha256()
    for name, p in model.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def decode(latent: np.ndarray, encoder: ImageEncoder, frames: int) -> np.ndarray:
    """Video latent [C, T', h, w] -> frames [3, T, H, W]."""
    return encoder.decode_video(np.asarray(latent, dtype=np.float32), frames)


# Checkpoints

def save_checkpoint(model: KeyTailorModel, path: Path) -> Path:
    """Text header (names, shapes, trainable flags, fingerprint) followed by KTSR records."""
    path = Path(path)
    params = list(model.named_parameters())
    header = [CHECKPOINT_MAGIC, f"fingerprint\t{config_fingerprint(model.cfg)}"]
    for name, p in params:
        shape = ",".join(str(s) for s in p.shape)
        header.append(f"param\t{name}\t{shape}\t{int(p.trainable)}")
    header.append("end")
    body = b"".join(ktsr.encode_tensor(p.data.astype(np.float32)) for _, p in params)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(("\n".join(header) + "\n").encode("utf-8") + body)
        tmp.replace(path)
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path}")
    return path


def read_checkpoint(path: Path) -> Tuple[str, List[Tuple[str, Tuple[int, ...], bool, np.ndarray]]]:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    marker = buffer.find(b"\nend\n")
    if marker < 0:
        raise FormatError(f"{path}: checkpoint header is not terminated")
    lines = buffer[:marker].decode("utf-8").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (header {lines[0]!r})")
    if len(lines) < 2 or not lines[1].startswith("fingerprint\t"):
        raise FormatError(f"{path}: missing fingerprint line")
    fingerprint = lines[1].split("\t", 1)[1]
    offset = marker + len(b"\nend\n")
    entries = []
    for line in lines[2:]:
        fields = line.split("\t")
        if len(fields) != 4 or fields[0] != "param":
            raise FormatError(f"{path}: bad header line {line!r}")
        shape = tuple(int(s) for s in fields[2].split(",") if s)
        array, offset = ktsr.decode_tensor(buffer, offset, source=str(path))
        if array.shape != shape:
            raise FormatError(f"{path}: tensor {fields[1]} stored as {array.shape}, header says {shape}")
        entries.append((fields[1], shape, fields[3] == "1", array))
    if offset != len(buffer):
        raise FormatError(f"{path}: {len(buffer) - offset} trailing bytes")
    return fingerprint, entries


def load_checkpoint(model: KeyTailorModel, path: Path) -> KeyTailorModel:
    """Load parameters in place after validating fingerprint, names and shapes."""
    fingerprint, entries = read_checkpoint(path)
    expected = config_fingerprint(model.cfg)
    if fingerprint != expected:
        raise LoadError(f"{path}: checkpoint fingerprint {fingerprint[:12]} "
                        f"does not match configuration {expected[:12]}")
    params = list(model.named_parameters())
    if [n for n, _ in params] != [e[0] for e in entries]:
        missing = sorted(set(n for n, _ in params) ^ set(e[0] for e in entries))
        raise LoadError(f"{path}: parameter names differ from the model: {missing[:5]}")
    for (name, p), (_, shape, trainable, array) in zip(params, entries):
        if p.shape != shape:
            raise LoadError(f"{path}: parameter {name} has shape {shape}, model expects {p.shape}")
        p.data = array.astype(p.data.dtype)
        p.trainable = trainable
        p.zero_grad()
    logger.info(f"Loaded checkpoint {path}")
    return model
