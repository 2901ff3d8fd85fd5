"""
Synthetic try-on scenes.

Each scene is a stick figure (17 joints) wearing a textured garment over a
static procedural background. A schedule decides the view shown in every
frame, which actions are running and when a horizontal occluder bar covers
part of the garment. Everything is derived from the seed.

On disk a sample is a directory holding KTSR tensors, a labels file and a
manifest listing them in a fixed role order.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import ktsr
from errors import ConfigurationError, FormatError, ShapeError, StorageError
from keyframe import BONES, Frame, SkeletonPose, generate_anchor_pose
from numerics import SeededRng
from providers import ACTIONS, VIEWS

logger = logging.getLogger(__name__)

MIN_SIZE = 32
ROLES = ("video", "agnostic", "masks", "occluded_masks", "pose", "garment_ref", "labels")
FILENAMES = {
    "video": "video.ktsr",
    "agnostic": "agnostic.ktsr",
    "masks": "masks.ktsr",
    "occluded_masks": "occluded_masks.ktsr",
    "pose": "pose.ktsr",
    "garment_ref": "garment_ref.ktsr",
    "labels": "labels.tsv",
}
MANIFEST = "manifest.tsv"

AGNOSTIC_FILL = 0.5
SKIN = np.array([0.87, 0.72, 0.60])
PANTS = np.array([0.20, 0.22, 0.38])
OCCLUDER = np.array([0.08, 0.08, 0.08])

ARM_BONES = ((5, 7), (7, 9), (6, 8), (8, 10))
SLEEVE_BONES = ((5, 7), (6, 8))
LEG_BONES = ((11, 13), (13, 15), (12, 14), (14, 16))
RIGHT_ARM = (6, 8, 10)


@dataclass
class SceneSpec:
    frames: int = 16
    height: int = 64
    width: int = 64
    fps: float = 8.0
    views: List[str] = field(default_factory=list)
    # (start, stop, tag) with stop exclusive
    actions: List[Tuple[int, int, str]] = field(default_factory=list)
    # (start, stop, fraction of garment area hidden)
    occlusions: List[Tuple[int, int, float]] = field(default_factory=list)
    garment_texture: int = 0
    background_texture: int = 0
    seed: int = 0

    def validate(self):
        if self.frames < 2:
            raise ConfigurationError(f"a scene needs at least 2 frames, got {self.frames}")
        if self.height < MIN_SIZE or self.width < MIN_SIZE:
            raise ConfigurationError(f"resolution {self.height}x{self.width} is below {MIN_SIZE}x{MIN_SIZE}")
        if len(self.views) != self.frames:
            raise ConfigurationError(f"view schedule covers {len(self.views)} of {self.frames} frames")
        unknown = [v for v in self.views if v not in VIEWS]
        if unknown:
            raise ConfigurationError(f"unknown views in schedule: {unknown}")
        for start, stop, tag in self.actions:
            if tag not in ACTIONS or not 0 <= start < stop <= self.frames:
                raise ConfigurationError(f"bad action event ({start}, {stop}, {tag})")
        for start, stop, fraction in self.occlusions:
            if not 0 <= start < stop <= self.frames or not 0.0 <= fraction <= 1.0:
                raise ConfigurationError(f"bad occlusion event ({start}, {stop}, {fraction})")

    def actions_at(self, t: int) -> List[str]:
        return [tag for tag in ACTIONS if any(s <= t < e and a == tag for s, e, a in self.actions)]

    def occlusion_at(self, t: int) -> float:
        return max([f for s, e, f in self.occlusions if s <= t < e], default=0.0)

    def labels_at(self, t: int) -> frozenset:
        return frozenset([self.views[t]] + self.actions_at(t))


@dataclass
class SyntheticSample:
    video: np.ndarray  # [3, T, H, W]
    agnostic: np.ndarray  # [3, T, H, W]
    garment_masks: np.ndarray  # [T, H, W], also the agnostic mask
    human_masks: np.ndarray  # [T, H, W]
    occluded_masks: np.ndarray  # [T, H, W]
    joints: np.ndarray  # [T, 17, 2]
    pose_maps: np.ndarray  # [3, T, H, W]
    garment_ref: np.ndarray  # [3, H, W]
    frames: List[Frame]
    spec: Optional[SceneSpec] = None

    @property
    def agnostic_masks(self) -> np.ndarray:
        return self.garment_masks

    @property
    def num_frames(self) -> int:
        return self.video.shape[1]


def random_scene_spec(seed: int, frames: int = 16, size: int = 64, fps: float = 8.0) -> SceneSpec:
    """Draw a view/action/occlusion schedule from the seed."""
    rng = SeededRng(seed, "scene")
    views = ["front"] * frames
    actions: List[Tuple[int, int, str]] = []
    if frames >= 8:
        n_cuts = int(rng.integers(1, 3))
        cuts = sorted(int(c) for c in rng.choice(np.arange(3, frames - 2), n_cuts))
        current = "front"
        for cut in cuts:
            current = str(rng.choice(np.array([v for v in VIEWS if v != current]), 1)[0])
            views[cut:] = [current] * (frames - cut)
            actions.append((max(0, cut - 1), min(frames, cut + 1), "turn"))
    if rng.uniform() < 0.7:
        length = int(rng.integers(3, 6))
        start = int(rng.integers(0, max(1, frames - length)))
        actions.append((start, min(frames, start + length), "raise-hand"))
    if rng.uniform() < 0.5:
        length = int(rng.integers(4, 9))
        start = int(rng.integers(0, max(1, frames - length)))
        actions.append((start, min(frames, start + length), "walk"))
    occlusions: List[Tuple[int, int, float]] = []
    if rng.uniform() < 0.6:
        length = int(rng.integers(2, 6))
        start = int(rng.integers(0, max(1, frames - length)))
        occlusions.append((start, min(frames, start + length), round(float(rng.uniform(0.3, 0.8)), 3)))
    if rng.uniform() < 0.3:
        start = int(rng.integers(0, frames - 1))
        occlusions.append((start, start + 1, 0.1))
    return SceneSpec(
        frames=frames, height=size, width=size, fps=fps, views=views, actions=actions,
        occlusions=occlusions, garment_texture=int(rng.integers(0, 1000)),
        background_texture=int(rng.integers(0, 1000)), seed=seed,
    )


# Drawing helpers

def _grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs + 0.5, ys + 0.5


def capsule_mask(xs: np.ndarray, ys: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    """Pixels within ``radius`` of segment ab (pixel coordinates)."""
    d = b - a
    length2 = float(d @ d)
    if length2 < 1e-12:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / length2, 0.0, 1.0)
    cx = a[0] + t * d[0]
    cy = a[1] + t * d[1]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


def garment_textures(texture_id: int, height: int, width: int) -> Dict[str, np.ndarray]:
    """Front (stripes) and back (checker) patterns of one garment, [3, H, W] each."""
    rng = SeededRng(texture_id, "garment")
    colors = rng.uniform(0.15, 0.95, (4, 3))
    xs, ys = _grid(height, width)
    stripes = (np.floor(ys / 4.0) % 2).astype(bool)
    checker = ((np.floor(ys / 6.0) + np.floor(xs / 6.0)) % 2).astype(bool)
    front = np.where(stripes[None], colors[0][:, None, None], colors[1][:, None, None])
    back = np.where(checker[None], colors[2][:, None, None], colors[3][:, None, None])
    return {"front": front, "back": back}


def background_texture(texture_id: int, height: int, width: int) -> np.ndarray:
    rng = SeededRng(texture_id, "background")
    top, bottom = rng.uniform(0.25, 0.85, (2, 3))
    xs, ys = _grid(height, width)
    ramp = ys / height
    image = top[:, None, None] * (1.0 - ramp) + bottom[:, None, None] * ramp
    for _ in range(6):
        x0, y0 = rng.integers(0, width - 4), rng.integers(0, height - 4)
        w, h = rng.integers(4, max(5, width // 3)), rng.integers(4, max(5, height // 3))
        image[:, y0:y0 + h, x0:x0 + w] = rng.uniform(0.0, 1.0, 3)[:, None, None]
    period = int(rng.integers(3, 7))
    band = (np.floor(xs / period) % 2).astype(bool) & (ys > height * 0.8)
    image = np.where(band[None], 1.0 - image, image)
    return np.clip(image, 0.0, 1.0)


def _texture_for(view: str, textures: Dict[str, np.ndarray]) -> np.ndarray:
    return textures["back"] if view == "back" else textures["front"]


def _warp(texture: np.ndarray, t: int, phase: float) -> np.ndarray:
    """Row-wise sinusoidal shift standing in for cloth wrinkles."""
    warped = np.empty_like(texture)
    for y in range(texture.shape[1]):
        shift = int(round(1.5 * math.sin(2.0 * math.pi * y / 9.0 + phase + 0.9 * t)))
        warped[:, y, :] = np.roll(texture[:, y, :], shift, axis=-1)
    return warped


def scene_pose(spec: SceneSpec, t: int) -> np.ndarray:
    """Normalized joints [17, 2] for frame t."""
    view = spec.views[t]
    active = spec.actions_at(t)
    joints = generate_anchor_pose(view).joints.copy()
    if "turn" in active:
        joints = 0.5 * (joints + generate_anchor_pose("turn").joints)
    if "raise-hand" in active:
        shoulder = joints[RIGHT_ARM[0]]
        joints[RIGHT_ARM[1]] = shoulder + np.array([0.0, -0.13])
        joints[RIGHT_ARM[2]] = shoulder + np.array([0.0, -0.25])
    if "walk" in active:
        start = min(s for s, e, a in spec.actions if a == "walk" and s <= t < e)
        swing = math.sin(1.3 * (t - start))
        joints[[13, 15], 0] += np.array([0.03, 0.05]) * swing
        joints[[14, 16], 0] -= np.array([0.03, 0.05]) * swing
        joints[:, 0] += 0.01 * (t - start)
    jitter = SeededRng(spec.seed, f"pose/{t}").normal((17, 2), std=0.003, dtype=np.float64)
    return np.clip(joints + jitter, 0.0, 1.0)


def body_masks(joints: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """(garment, human) boolean masks for normalized joints; garment is a subset of human."""
    xs, ys = _grid(height, width)
    points = joints * np.array([width, height])
    limb = max(1.5, 0.025 * width)
    leg = max(1.5, 0.03 * width)
    shoulder_mid = 0.5 * (points[5] + points[6])
    hip_mid = 0.5 * (points[11] + points[12])
    torso_radius = max(0.5 * float(np.linalg.norm(points[5] - points[6])), 0.06 * width)
    torso = capsule_mask(xs, ys, shoulder_mid, hip_mid, torso_radius)
    garment = torso.copy()
    for i, j in SLEEVE_BONES:
        garment |= capsule_mask(xs, ys, points[i], points[j], limb + 0.5)
    human = garment | ((xs - points[0][0]) ** 2 + (ys - points[0][1]) ** 2 <= (0.06 * height) ** 2)
    for i, j in ARM_BONES:
        human |= capsule_mask(xs, ys, points[i], points[j], limb)
    for i, j in LEG_BONES:
        human |= capsule_mask(xs, ys, points[i], points[j], leg)
    return garment & human, human


def leg_mask(joints: np.ndarray, height: int, width: int) -> np.ndarray:
    xs, ys = _grid(height, width)
    points = joints * np.array([width, height])
    leg = max(1.5, 0.03 * width)
    mask = np.zeros((height, width), dtype=bool)
    for i, j in LEG_BONES:
        mask |= capsule_mask(xs, ys, points[i], points[j], leg)
    return mask


def occluder_rows(garment: np.ndarray, fraction: float) -> np.ndarray:
    """
    Rows covered by a full-width bar hiding ``fraction`` of the garment.

    The bar grows upward from the garment's bottom row until the cumulative
    garment area it covers reaches the fraction, so the hidden share lands
    within one row of the request.
    """
    rows = np.zeros(garment.shape[0], dtype=bool)
    area = garment.sum()
    if fraction <= 0 or area == 0:
        return rows
    per_row = garment.sum(axis=1)
    covered = np.cumsum(per_row[::-1])[::-1]  # garment pixels in rows y..H-1
    goal = fraction * area
    candidates = np.nonzero(covered >= goal)[0]
    cut = int(candidates.max()) if len(candidates) else 0
    rows[cut:] = True
    return rows


def render_pose_map(joints: np.ndarray, height: int, width: int) -> np.ndarray:
    """Skeleton render [3, H, W]: each bone drawn in its own fixed color."""
    xs, ys = _grid(height, width)
    points = joints * np.array([width, height])
    image = np.zeros((3, height, width))
    radius = max(1.0, 0.02 * width)
    for b, (i, j) in enumerate(BONES):
        color = np.array([(b * 37) % 97, (b * 61) % 97, (b * 17 + 40) % 97]) / 96.0
        mask = capsule_mask(xs, ys, points[i], points[j], radius)
        image[:, mask] = color[:, None]
    return image


def make_agnostic(video: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Replace the masked garment region of every frame by mid-gray."""
    if video.ndim != 4 or masks.shape != video.shape[1:]:
        raise ShapeError(f"video {video.shape} and masks {masks.shape} do not agree")
    return np.where(masks[None] > 0.5, np.float32(AGNOSTIC_FILL), video).astype(np.float32)


def garment_reference(textures: Dict[str, np.ndarray], height: int, width: int) -> np.ndarray:
    """Front garment texture on a flat front-facing garment, white elsewhere."""
    garment, _ = body_masks(generate_anchor_pose("front").joints, height, width)
    return np.where(garment[None], textures["front"], 1.0).astype(np.float32)


def generate_scene(spec: SceneSpec) -> SyntheticSample:
    spec.validate()
    T, H, W = spec.frames, spec.height, spec.width
    textures = garment_textures(spec.garment_texture, H, W)
    background = background_texture(spec.background_texture, H, W)
    phase = float(SeededRng(spec.seed, "warp").uniform(0.0, 2.0 * math.pi))

    video = np.zeros((3, T, H, W), dtype=np.float32)
    garments = np.zeros((T, H, W), dtype=np.float32)
    humans = np.zeros((T, H, W), dtype=np.float32)
    occluded = np.zeros((T, H, W), dtype=np.float32)
    joints = np.zeros((T, 17, 2), dtype=np.float32)
    pose_maps = np.zeros((3, T, H, W), dtype=np.float32)
    for t in range(T):
        pose = scene_pose(spec, t).astype(np.float32)
        garment, human = body_masks(pose.astype(np.float64), H, W)
        texture = _texture_for(spec.views[t], textures)
        if spec.actions_at(t):
            texture = _warp(texture, t, phase)
        image = background.copy()
        image[:, human] = SKIN[:, None]
        image[:, leg_mask(pose.astype(np.float64), H, W) & human] = PANTS[:, None]
        image = np.where(garment[None], texture, image)
        rows = occluder_rows(garment, spec.occlusion_at(t))
        image[:, rows, :] = OCCLUDER[:, None, None]
        video[:, t] = image
        garments[t] = garment
        humans[t] = human
        occluded[t] = garment & rows[:, None]
        joints[t] = pose
        pose_maps[:, t] = render_pose_map(pose.astype(np.float64), H, W)

    frames = build_frames(video, garments, humans, occluded, joints,
                          [t / spec.fps for t in range(T)], [spec.labels_at(t) for t in range(T)])
    return SyntheticSample(
        video=video,
        agnostic=make_agnostic(video, garments),
        garment_masks=garments,
        human_masks=humans,
        occluded_masks=occluded,
        joints=joints,
        pose_maps=pose_maps,
        garment_ref=garment_reference(textures, H, W),
        frames=frames,
        spec=spec,
    )


def build_frames(video, garments, humans, occluded, joints, timestamps, labels) -> List[Frame]:
    return [
        Frame(
            index=t,
            timestamp=float(timestamps[t]),
            pixels=video[:, t],
            garment_mask=garments[t],
            human_mask=humans[t],
            occluded_garment_mask=occluded[t],
            pose=SkeletonPose(joints[t].astype(np.float64)),
            labels=frozenset(labels[t]),
        )
        for t in range(video.shape[1])
    ]


# Persistence

def _view_of(labels: frozenset) -> str:
    views = [v for v in VIEWS if v in labels]
    return views[0] if views else ""


def write_sample(sample: SyntheticSample, directory: Path) -> Path:
    directory = Path(directory)
    tensors = {
        "video": sample.video,
        "agnostic": sample.agnostic,
        "masks": np.stack([sample.garment_masks, sample.human_masks]),
        "occluded_masks": sample.occluded_masks,
        "pose": sample.joints,
        "garment_ref": sample.garment_ref,
    }
    for role, array in tensors.items():
        ktsr.write_tensor(directory / FILENAMES[role], array)
    lines = []
    for frame in sample.frames:
        actions = ",".join(a for a in ACTIONS if a in frame.labels)
        lines.append(f"{frame.index}\t{frame.timestamp!r}\t{_view_of(frame.labels)}\t{actions}")
    try:
        (directory / FILENAMES["labels"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifest = "".join(f"{role}\t{FILENAMES[role]}\n" for role in ROLES)
        (directory / MANIFEST).write_text(manifest, encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write sample {directory}: {e}") from e
    logger.info(f"Wrote sample to {directory}")
    return directory


def read_manifest(directory: Path) -> Dict[str, Path]:
    path = Path(directory)
    if path.is_file():
        path = path.parent
    manifest = path / MANIFEST
    try:
        lines = [ln for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as e:
        raise StorageError(f"cannot read manifest {manifest}: {e}") from e
    entries = []
    for n, line in enumerate(lines, 1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise FormatError(f"{manifest}:{n}: expected role<TAB>path, got {line!r}")
        entries.append((fields[0], fields[1]))
    roles = tuple(role for role, _ in entries)
    if roles != ROLES:
        raise FormatError(f"{manifest}: roles {roles} do not follow the required order {ROLES}")
    return {role: path / rel for role, rel in entries}


def read_labels(path: Path) -> Tuple[List[int], List[float], List[frozenset]]:
    try:
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as e:
        raise StorageError(f"cannot read labels {path}: {e}") from e
    indices, stamps, labels = [], [], []
    for n, line in enumerate(lines, 1):
        fields = line.split("\t")
        if len(fields) != 4:
            raise FormatError(f"{path}:{n}: expected index<TAB>timestamp<TAB>view<TAB>actions")
        try:
            indices.append(int(fields[0]))
            stamps.append(float(fields[1]))
        except ValueError:
            raise FormatError(f"{path}:{n}: bad index or timestamp in {line!r}")
        tags = ([fields[2]] if fields[2] else []) + [a for a in fields[3].split(",") if a]
        labels.append(frozenset(tags))
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise FormatError(f"{path}: timestamps are not strictly increasing")
    return indices, stamps, labels


def read_sample(directory: Path) -> SyntheticSample:
    paths = read_manifest(directory)
    video = ktsr.read_tensor(paths["video"])
    agnostic = ktsr.read_tensor(paths["agnostic"])
    masks = ktsr.read_tensor(paths["masks"])
    occluded = ktsr.read_tensor(paths["occluded_masks"])
    joints = ktsr.read_tensor(paths["pose"])
    garment_ref = ktsr.read_tensor(paths["garment_ref"])
    _, stamps, labels = read_labels(paths["labels"])

    if video.ndim != 4 or video.shape[0] != 3:
        raise FormatError(f"video tensor has shape {video.shape}, expected [3, T, H, W]")
    _, T, H, W = video.shape
    expected = {
        "agnostic": (agnostic.shape, (3, T, H, W)),
        "masks": (masks.shape, (2, T, H, W)),
        "occluded_masks": (occluded.shape, (T, H, W)),
        "pose": (joints.shape, (T, 17, 2)),
        "garment_ref": (garment_ref.shape, (3, H, W)),
    }
    for role, (got, want) in expected.items():
        if tuple(got) != want:
            raise FormatError(f"{role} tensor has shape {tuple(got)}, expected {want}")
    if len(stamps) != T:
        raise FormatError(f"labels list {len(stamps)} frames, video has {T}")

    pose_maps = np.stack([render_pose_map(joints[t].astype(np.float64), H, W) for t in range(T)], axis=1)
    frames = build_frames(video, masks[0], masks[1], occluded, joints, stamps, labels)
    return SyntheticSample(
        video=video, agnostic=agnostic, garment_masks=masks[0], human_masks=masks[1],
        occluded_masks=occluded, joints=joints, pose_maps=pose_maps.astype(np.float32),
        garment_ref=garment_ref, frames=frames,
    )


def sample_dir(out: Path, seed: int) -> Path:
    return Path(out) / f"sample_{seed:04d}"


def generate_corpus(seeds: Sequence[int], frames: int, size: int, out: Path, threads: int = 1,
                    fps: float = 8.0) -> List[Path]:
    """Write one sample directory per seed; results come back in seed order."""
    if size < MIN_SIZE:
        raise ConfigurationError(f"--size {size} is below the minimum {MIN_SIZE}")

    def build(seed: int) -> Path:
        sample = generate_scene(random_scene_spec(seed, frames=frames, size=size, fps=fps))
        return write_sample(sample, sample_dir(out, seed))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(build, seeds))
