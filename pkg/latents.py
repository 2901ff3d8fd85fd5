"""
Conditioning latents.

Builds everything the transformer is conditioned on: the toy image/video
encoder, the first-frame garment composite, keyframe garment distillation,
the background fusion of the agnostic video with the best-background
keyframe, the zero-initialized pose and mask guiders, and the three-step
token fusion.

Resolution contract: image latents live on the /8 spatial grid, video
latents additionally pool time by 4 (T' = ceil(T/4)). Guiders downsample to
/16 and a depth-to-space step brings them back to /8, so every latent that
meets in fusion shares one [T', H/8, W/8] grid.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import ShapeError, UsageError
from keyframe import Frame, KeyframeSet, background_integrity_score
from numerics import (Module, Parameter, SeededRng, Tensor, add, broadcast_to, concat, conv1x1, conv3d, gelu,
                      layernorm, linear, no_grad, orthogonal, patchify, permute, pixel_shuffle, reshape, scale,
                      unpatchify, zeros)
from synth import render_pose_map

logger = logging.getLogger(__name__)

IMAGE_PATCH = 8
TEMPORAL_POOL = 4
GUIDER_STRIDES = ((1, 2, 2), (1, 2, 2), (2, 2, 2), (2, 2, 2))
FEATHER_WIDTH = 2


# Toy VAE

class ImageEncoder:
    """
    Invertible stand-in for a VAE encoder.

    An image is cut into 8x8 patches (192 values each) and projected onto
    the first C rows of a seeded orthonormal 192x192 matrix. With C = 192
    decode(encode(x)) is exact up to float rounding.
    """

    def __init__(self, channels: int = 16, seed: int = 0):
        width = 3 * IMAGE_PATCH * IMAGE_PATCH
        if not 1 <= channels <= width:
            raise ShapeError(f"latent channels must be in [1, {width}], got {channels}")
        self.channels = channels
        basis = orthogonal(SeededRng(seed, "image_encoder"), width)
        self.projection = basis[:channels].astype(np.float32)  # [C, 192]

    def grid(self, height: int, width: int) -> Tuple[int, int]:
        if height % IMAGE_PATCH or width % IMAGE_PATCH:
            raise ShapeError(f"image {height}x{width} is not divisible by {IMAGE_PATCH}")
        return height // IMAGE_PATCH, width // IMAGE_PATCH

    def encode(self, image: np.ndarray) -> np.ndarray:
        """[3, H, W] -> [C, H/8, W/8]"""
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"encoder expects an RGB image [3, H, W], got {image.shape}")
        h, w = self.grid(*image.shape[1:])
        with no_grad():
            tokens = patchify(Tensor(image, dtype=np.float32), (IMAGE_PATCH, IMAGE_PATCH)).data
        latent = tokens @ self.projection.T  # [N, C]
        return np.ascontiguousarray(latent.T.reshape(self.channels, h, w))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """[C, h, w] -> [3, 8h, 8w]"""
        latent = np.asarray(latent, dtype=np.float32)
        if latent.ndim != 3 or latent.shape[0] != self.channels:
            raise ShapeError(f"decoder expects a latent [{self.channels}, h, w], got {latent.shape}")
        _, h, w = latent.shape
        tokens = latent.reshape(self.channels, h * w).T @ self.projection  # [N, 192]
        with no_grad():
            image = unpatchify(Tensor(tokens, dtype=np.float32), (3, h * IMAGE_PATCH, w * IMAGE_PATCH),
                               (IMAGE_PATCH, IMAGE_PATCH))
        return image.data

    def encode_video(self, video: np.ndarray) -> np.ndarray:
        """[3, T, H, W] -> [C, ceil(T/4), H/8, W/8] by per-frame encoding and temporal mean pooling."""
        if video.ndim != 4:
            raise ShapeError(f"video must be [3, T, H, W], got {video.shape}")
        per_frame = np.stack([self.encode(video[:, t]) for t in range(video.shape[1])], axis=1)
        return temporal_pool(per_frame)

    def decode_video(self, latent: np.ndarray, frames: int) -> np.ndarray:
        """[C, T', h, w] -> [3, frames, 8h, 8w]; each latent frame covers 4 output frames."""
        if latent.ndim != 4 or latent.shape[1] != latent_frames(frames):
            raise ShapeError(f"latent {latent.shape} does not cover {frames} frames")
        decoded = [self.decode(latent[:, i]) for i in range(latent.shape[1])]
        return np.stack([decoded[t // TEMPORAL_POOL] for t in range(frames)], axis=1)


def latent_frames(frames: int) -> int:
    return -(-frames // TEMPORAL_POOL)


def temporal_pool(grid: np.ndarray) -> np.ndarray:
    """Mean over consecutive groups of 4 along axis 1; the last group may be shorter."""
    groups = [grid[:, s:s + TEMPORAL_POOL].mean(axis=1) for s in range(0, grid.shape[1], TEMPORAL_POOL)]
    return np.stack(groups, axis=1).astype(np.float32)


def mask_latent(masks: np.ndarray) -> np.ndarray:
    """Agnostic masks [T, H, W] -> L_m [1, T', H/8, W/8] by block averaging."""
    T, H, W = masks.shape
    if H % IMAGE_PATCH or W % IMAGE_PATCH:
        raise ShapeError(f"mask {H}x{W} is not divisible by {IMAGE_PATCH}")
    spatial = masks.reshape(T, H // IMAGE_PATCH, IMAGE_PATCH, W // IMAGE_PATCH, IMAGE_PATCH).mean(axis=(2, 4))
    return temporal_pool(spatial[None].astype(np.float32))


def render_pose_video(joints: np.ndarray, height: int, width: int) -> np.ndarray:
    """Skeleton renders [3, T, H, W] for joints [T, 17, 2]."""
    maps = [render_pose_map(joints[t].astype(np.float64), height, width) for t in range(joints.shape[0])]
    return np.stack(maps, axis=1).astype(np.float32)


# Garment conditions

def feather_weights(mask: np.ndarray, width: int = FEATHER_WIDTH) -> np.ndarray:
    """
    Blend weight of the garment layer: 1 at least ``width`` pixels inside the
    mask, 0 at least ``width`` pixels outside, linear across the boundary band.
    """
    mask = np.asarray(mask) > 0.5
    if not mask.any():
        return np.zeros(mask.shape)
    if mask.all():
        return np.ones(mask.shape)
    inside = ndimage.distance_transform_cdt(mask, metric="chessboard")
    outside = ndimage.distance_transform_cdt(~mask, metric="chessboard")
    signed = np.where(mask, inside, -outside).astype(np.float64)
    return np.clip((signed + width - 0.5) / (2 * width - 1), 0.0, 1.0)


def first_frame_tryon(agnostic_frame: np.ndarray, garment_image: np.ndarray, garment_mask: np.ndarray) -> np.ndarray:
    """Composite the garment image into the agnostic frame with a feathered mask."""
    if agnostic_frame.shape != garment_image.shape or agnostic_frame.shape[1:] != garment_mask.shape:
        raise ShapeError(f"try-on inputs disagree: frame {agnostic_frame.shape}, garment {garment_image.shape}, "
                         f"mask {garment_mask.shape}")
    weight = feather_weights(garment_mask)[None]
    composite = weight * garment_image + (1.0 - weight) * agnostic_frame
    return composite.astype(np.float32)


def _frames_by_index(frames: Sequence[Frame]) -> Dict[int, Frame]:
    return {f.index: f for f in frames}


def extract_keyframe_garment_latents(keyframes: KeyframeSet, frames: Sequence[Frame],
                                     encoder: ImageEncoder) -> List[np.ndarray]:
    if not keyframes.selected:
        raise UsageError("no keyframes to extract garment latents from")
    lookup = _frames_by_index(frames)
    latents = []
    for index in keyframes.indices:
        frame = lookup[index]
        latents.append(encoder.encode(frame.pixels * frame.garment_mask[None]))
    return latents


def background_keyframe_latent(keyframes: KeyframeSet, frames: Sequence[Frame], encoder: ImageEncoder,
                               threshold: float = 50.0) -> Tuple[np.ndarray, int]:
    """
    L_key^max: encoded background of the keyframe with the highest
    background integrity score (ties go to the lowest frame index).

    Returns:
        (latent [C, h, w], chosen frame index)
    """
    if not keyframes.selected:
        raise UsageError("no keyframes to choose a background from")
    lookup = _frames_by_index(frames)
    best_index, best_score = None, -math.inf
    for index in sorted(keyframes.indices):
        score = background_integrity_score(lookup[index], threshold)
        if score > best_score:
            best_index, best_score = index, score
    frame = lookup[best_index]
    logger.debug(f"Background keyframe {best_index} with S_bg={best_score:.4f}")
    return encoder.encode(frame.pixels * (1.0 - frame.human_mask[None])), best_index


# Trainable conditioning modules

class GuiderNet(Module):
    """
    Four strided 3-D convolutions (GELU between) and a zero-initialized
    pointwise projection followed by a 2x depth-to-space step, mapping a
    [3, T, H, W] video onto the [C, T', H/8, W/8] latent grid.
    """

    def __init__(self, out_channels: int, rng: SeededRng, channels: Sequence[int] = (32, 96, 192, 256)):
        self.out_channels = out_channels
        widths = [3] + list(channels)
        self.weights = []
        self.biases = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            std = math.sqrt(2.0 / (c_in * 27))
            self.weights.append(Parameter(rng.normal((c_out, c_in, 3, 3, 3), std=std)))
            self.biases.append(Parameter(np.zeros(c_out)))
        self.proj_weight = Parameter(np.zeros((4 * out_channels, widths[-1])))
        self.proj_bias = Parameter(np.zeros(4 * out_channels))

    def forward(self, video: Tensor) -> Tensor:
        _, _, height, width = video.shape
        if height % 16 or width % 16:
            raise ShapeError(f"guider input {video.shape} needs H and W divisible by 16")
        h = video
        for w, b, stride in zip(self.weights, self.biases, GUIDER_STRIDES):
            h = gelu(conv3d(h, w, b, stride=stride))
        h = conv1x1(h, self.proj_weight, self.proj_bias)
        return pixel_shuffle(h, 2)


class DistillComponent(Module):
    """Two pointwise convolutions (2C -> C -> C) and a LayerNorm over channels."""

    def __init__(self, channels: int):
        eye = np.eye(channels)
        self.w1 = Parameter(0.5 * np.concatenate([eye, eye], axis=1))
        self.b1 = Parameter(np.zeros(channels))
        self.w2 = Parameter(eye)
        self.b2 = Parameter(np.zeros(channels))
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, garment: Tensor, keyframe_mean: Tensor) -> Tensor:
        h = conv1x1(concat([garment, keyframe_mean], axis=0), self.w1, self.b1)
        h = conv1x1(h, self.w2, self.b2)
        h = layernorm(permute(h, (1, 2, 0)), self.gain, self.bias)
        return permute(h, (2, 0, 1))


class FusionProjection(Module):
    """ℛ: bias-free linear map of [T_inp | garment tokens] back to the T_inp width, initialized [I | 0]."""

    def __init__(self, in_width: int, garment_width: int, out_width: int):
        weight = np.zeros((out_width, in_width + garment_width))
        weight[:, :out_width] = np.eye(out_width)
        self.weight = Parameter(weight)

    def forward(self, inputs: Tensor, garment_tokens: Tensor) -> Tensor:
        return linear(concat([inputs, garment_tokens], axis=1), self.weight)


def mean_latent(latents: Sequence[Tensor]) -> Tensor:
    if not latents:
        raise UsageError("mean of an empty latent list")
    total = latents[0]
    for latent in latents[1:]:
        total = add(total, latent)
    return scale(total, 1.0 / len(latents))


def gdde_distill(garment: Tensor, keyframe_latents: Sequence[Tensor], distill: DistillComponent) -> Tensor:
    """L̄_g = 𝒟(concat(L_g, mean of keyframe garment latents))."""
    if not keyframe_latents:
        raise UsageError("garment distillation needs at least one keyframe latent")
    for i, latent in enumerate(keyframe_latents):
        if latent.shape != garment.shape:
            raise ShapeError(f"keyframe latent {i} has shape {latent.shape}, garment latent {garment.shape}")
    return distill(garment, mean_latent(list(keyframe_latents)))


def cbdo_fuse(background: Tensor, key_background: Tensor, alpha: float = 0.3) -> Tensor:
    """L̄_bg = α·L_bg + (1 − α)·L_key^max, the keyframe latent broadcast over time."""
    if background.ndim != 4 or key_background.ndim != 3 or \
            key_background.shape != (background.shape[0],) + background.shape[2:]:
        raise ShapeError(f"cannot fuse background {background.shape} with keyframe background {key_background.shape}")
    c, t, h, w = background.shape
    key = broadcast_to(reshape(key_background, (c, 1, h, w)), (c, t, h, w))
    return add(scale(background, alpha), scale(key, 1.0 - alpha))


def _check_role(role: str, latent: Tensor, expected: Tuple[int, ...]):
    if latent.shape != tuple(expected):
        raise ShapeError(f"{role} latent has shape {latent.shape}, expected {tuple(expected)}")


def fuse_guidance(pose: Tensor, mask: Tensor, garment: Tensor, noise: Tensor, background: Tensor,
                  projection: FusionProjection, patch: Sequence[int] = (1, 1, 1),
                  extra: Optional[Tensor] = None) -> Tensor:
    """
    Three-step fusion into guidance tokens [N, (2C+1)·p].

    1. T_inp = patchify(concat(L_p, L_m[, extra])); L = ℛ(T_inp, garment tokens)
    2. L̄ = [L | patchify(noise)]
    3. add patchify(L̄_bg) onto the leading columns of L̄
    """
    c, t, h, w = noise.shape
    _check_role("pose", pose, (c, t, h, w))
    _check_role("mask", mask, (1, t, h, w))
    _check_role("garment", garment, (c, h, w))
    _check_role("background", background, (c, t, h, w))
    channels = [pose, mask] + ([extra] if extra is not None else [])
    if extra is not None:
        _check_role("keyframe background", extra, (c, t, h, w))
    inputs = patchify(concat(channels, axis=0), patch)
    garment_grid = broadcast_to(reshape(garment, (c, 1, h, w)), (c, t, h, w))
    fused = projection(inputs, patchify(garment_grid, patch))
    tokens = concat([fused, patchify(noise, patch)], axis=1)
    background_tokens = patchify(background, patch)
    pad = zeros((tokens.shape[0], tokens.shape[1] - background_tokens.shape[1]))
    return add(tokens, concat([background_tokens, pad], axis=1))


@dataclass
class LatentBundle:
    """Conditioning latents for one sample on the shared [T', h, w] grid."""

    garment: Tensor  # L̄_g [C, h, w]
    background: Tensor  # L̄_bg [C, T', h, w]
    pose: Tensor  # L_p [C, T', h, w]
    mask: Tensor  # L_m [1, T', h, w]
    keyframe_mean: Optional[Tensor] = None  # mean keyframe garment latent [C, h, w]
    extra: Optional[Tensor] = None  # keyframe background channels when fusion is replaced by concat
    noise: Optional[Tensor] = None

    ROLES = ("garment", "background", "pose", "mask", "keyframe_mean", "extra")

    def roles(self) -> Dict[str, Optional[np.ndarray]]:
        return {role: (getattr(self, role).data if getattr(self, role) is not None else None)
                for role in self.ROLES}

    def detached(self) -> "LatentBundle":
        def d(x):
            return x.detach() if x is not None else None
        return LatentBundle(d(self.garment), d(self.background), d(self.pose), d(self.mask),
                            d(self.keyframe_mean), d(self.extra), d(self.noise))


@dataclass
class SampleConditions:
    """Precomputed, parameter-free inputs of one sample."""

    pose_video: np.ndarray  # P [3, T, H, W]
    agnostic_video: np.ndarray  # V_agn [3, T, H, W]
    mask_latent: np.ndarray  # L_m [1, T', h, w]
    garment_latent: np.ndarray  # L_g [C, h, w], encoded first-frame try-on
    reference_latent: np.ndarray  # encoded garment reference image
    keyframe_latents: List[np.ndarray]  # keyframe garment latents [C, h, w]
    key_background: Optional[np.ndarray]  # L_key^max [C, h, w]
    frames: int = 0
    keyframe_indices: Tuple[int, ...] = ()
    background_index: Optional[int] = None

    @property
    def latent_shape(self) -> Tuple[int, int, int, int]:
        _, t, h, w = self.mask_latent.shape
        return (self.garment_latent.shape[0], t, h, w)
