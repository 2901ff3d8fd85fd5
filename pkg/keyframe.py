"""
Instruction-guided keyframe sampling and the frame scores it relies on.

A frame is scored against the parsed instruction targets (S_ins), against
canonical anchor skeletons (S_m), by garment coverage (S_r) and by garment
occlusion. Selection filters occluded frames, ranks the rest and greedily
accepts candidates that are both far enough in time and distinct enough in
score from what is already selected.
"""
import functools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy import ndimage

import providers
from config import SamplerConfig, ScoringMode
from errors import ConfigurationError, EmptyTargetsError, ShapeError, StorageError, UsageError
from numerics import SeededRng

logger = logging.getLogger(__name__)

ANCHOR_TABLE = Path(__file__).with_name("anchor_poses.yaml")

NUM_JOINTS = 17
BONES: Tuple[Tuple[int, int], ...] = (
    (0, 1), (0, 2), (1, 3), (2, 4),
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SkeletonPose:
    joints: np.ndarray  # [J, 2], normalized (x, y)

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.shape != (NUM_JOINTS, 2):
            raise ShapeError(f"skeleton needs {NUM_JOINTS}x2 joints, got {joints.shape}")
        object.__setattr__(self, "joints", joints)

    def bone_directions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unit bone vectors [B, 2] and a validity flag per bone (False when degenerate)."""
        starts = self.joints[[i for i, _ in BONES]]
        ends = self.joints[[j for _, j in BONES]]
        vectors = ends - starts
        norms = np.linalg.norm(vectors, axis=1)
        valid = norms > 1e-9
        directions = np.zeros_like(vectors)
        directions[valid] = vectors[valid] / norms[valid, None]
        return directions, valid


@dataclass
class Frame:
    index: int
    timestamp: float
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    garment_mask: np.ndarray  # [H, W] in {0, 1}
    human_mask: np.ndarray
    occluded_garment_mask: np.ndarray
    pose: SkeletonPose
    labels: FrozenSet[str] = frozenset()

    @property
    def size(self) -> Tuple[int, int]:
        return self.garment_mask.shape


@dataclass(frozen=True)
class InstructionTargets:
    views: Tuple[str, ...] = ()
    actions: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.views and not self.actions:
            raise EmptyTargetsError("instruction names no recognised view or action")

    @property
    def all(self) -> Tuple[str, ...]:
        return tuple(self.views) + tuple(self.actions)


@dataclass
class FrameScore:
    index: int
    timestamp: float
    s_ins: float
    s_m: float
    s_r: float
    occlusion_ratio: float
    initial_score: float
    temporal_score: float = 1.0
    final_score: float = 0.0


@dataclass
class KeyframeSet:
    selected: List[FrameScore] = field(default_factory=list)
    t_thres: float = 0.0
    status: str = "ok"
    strategy: str = "instruction"

    @property
    def indices(self) -> List[int]:
        return [s.index for s in self.selected]

    def __len__(self):
        return len(self.selected)


def parse_instruction(text: str, parser: str = "keyword") -> InstructionTargets:
    views, actions = providers.get_parser(parser).parse(text)
    if not views and not actions:
        raise EmptyTargetsError(f"no recognised view or action in instruction {text!r}")
    return InstructionTargets(tuple(views), tuple(actions))


@functools.lru_cache(maxsize=None)
def _anchor_table() -> dict:
    try:
        with open(ANCHOR_TABLE, "r", encoding="utf-8") as f:
            table = yaml.safe_load(f)
    except OSError as e:
        raise StorageError(f"cannot read anchor pose table {ANCHOR_TABLE}: {e}") from e
    return {name: tuple(map(tuple, joints)) for name, joints in table["poses"].items()}


def generate_anchor_pose(target: str) -> SkeletonPose:
    """Canonical skeleton for a view or action from the shipped table."""
    table = _anchor_table()
    if target not in table:
        raise ConfigurationError(f"no anchor pose for target {target!r}; known: {sorted(table)}")
    return SkeletonPose(np.array(table[target], dtype=np.float64))


def anchors_for(targets: InstructionTargets) -> List[SkeletonPose]:
    return [generate_anchor_pose(t) for t in targets.all]


def motion_difference_score(frame, anchors: Sequence[SkeletonPose]) -> float:
    """
    S_m: smallest pose similarity to any anchor.

    Similarity is the cosine between concatenated bone directions over the
    bones valid in both poses, mapped to [0, 1] as (1 + cos) / 2. A pair with
    no shared valid bone scores 0.
    """
    if not anchors:
        raise UsageError("motion difference needs at least one anchor pose")
    pose = frame.pose if isinstance(frame, Frame) else frame
    own, own_valid = pose.bone_directions()
    worst = 1.0
    for anchor in anchors:
        other, other_valid = anchor.bone_directions()
        both = own_valid & other_valid
        if not both.any():
            return 0.0
        u = own[both].ravel()
        v = other[both].ravel()
        cos = float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
        worst = min(worst, float(np.clip((1.0 + cos) / 2.0, 0.0, 1.0)))
    return worst


def garment_area_ratio(frame: Frame) -> float:
    h, w = frame.garment_mask.shape
    return float(frame.garment_mask.sum()) / (h * w)


def occlusion_ratio(frame: Frame) -> float:
    area = float(frame.garment_mask.sum())
    if area == 0:
        return 1.0
    return min(1.0, float(frame.occluded_garment_mask.sum()) / area)


def instruction_score(frame: Frame, targets: InstructionTargets, scorer: str = "labels") -> float:
    return providers.get_scorer(scorer).score(frame.labels, targets.all)


def frame_score(frame: Frame, anchors: Sequence[SkeletonPose], targets: InstructionTargets,
                cfg: SamplerConfig) -> FrameScore:
    s_ins = instruction_score(frame, targets, cfg.scorer)
    s_m = motion_difference_score(frame, anchors)
    s_r = garment_area_ratio(frame)
    if cfg.scoring_mode == ScoringMode.EQ1:
        initial = 1.0 - s_m + cfg.lambda_ * s_r
    else:
        initial = cfg.w1 * s_ins + cfg.w2 * (1.0 - s_m) + cfg.w3 * s_r + cfg.w4 * 1.0
    return FrameScore(
        index=frame.index,
        timestamp=frame.timestamp,
        s_ins=s_ins,
        s_m=s_m,
        s_r=s_r,
        occlusion_ratio=occlusion_ratio(frame),
        initial_score=initial,
        final_score=initial,
    )


def default_t_thres(frames: Sequence[Frame]) -> float:
    stamps = [f.timestamp for f in frames]
    return (max(stamps) - min(stamps)) / 5.0


def score_frames(frames: Sequence[Frame], targets: InstructionTargets, cfg: SamplerConfig,
                 anchors: Optional[Sequence[SkeletonPose]] = None) -> List[FrameScore]:
    anchors = anchors_for(targets) if anchors is None else anchors
    return [frame_score(f, anchors, targets, cfg) for f in frames]


def select_keyframes(frames: Sequence[Frame], targets: InstructionTargets, cfg: SamplerConfig,
                     anchors: Optional[Sequence[SkeletonPose]] = None) -> KeyframeSet:
    if not frames:
        raise UsageError("keyframe selection needs at least one frame")
    t_thres = cfg.t_thres if cfg.t_thres is not None else default_t_thres(frames)
    scores = score_frames(frames, targets, cfg, anchors)

    candidates = [s for s in scores if s.occlusion_ratio <= cfg.occlu_thres]
    if not candidates:
        logger.warning(f"All {len(frames)} frames exceed occlusion threshold {cfg.occlu_thres}; no keyframes")
        return KeyframeSet([], t_thres=t_thres, status="empty")
    candidates.sort(key=lambda s: (-s.initial_score, s.index))

    selected: List[FrameScore] = []
    for candidate in candidates:
        if len(selected) >= cfg.k_max:
            break
        if not selected:
            selected.append(replace(candidate, temporal_score=1.0, final_score=candidate.initial_score))
            continue
        gap = min(abs(candidate.timestamp - s.timestamp) for s in selected)
        temporal = 1.0 if t_thres <= 0 else gap / t_thres
        final = candidate.initial_score * temporal
        diff = min(abs(final - s.initial_score) for s in selected)
        if diff >= cfg.score_diff_min and gap >= t_thres:
            selected.append(replace(candidate, temporal_score=temporal, final_score=final))
    logger.info(f"Selected keyframes {[s.index for s in selected]} from {len(candidates)} candidates")
    return KeyframeSet(selected, t_thres=t_thres)


def random_keyframes(frames: Sequence[Frame], targets: InstructionTargets, cfg: SamplerConfig,
                     rng: SeededRng, count: int = 3) -> KeyframeSet:
    """Uniformly sampled keyframes, ignoring every score."""
    scores = score_frames(frames, targets, cfg)
    picks = sorted(int(i) for i in rng.choice(len(frames), min(count, len(frames))))
    return KeyframeSet([scores[i] for i in picks], status="ok", strategy="random")


def first_frame_keyframes(frames: Sequence[Frame], targets: InstructionTargets, cfg: SamplerConfig) -> KeyframeSet:
    first = min(frames, key=lambda f: f.index)
    score = frame_score(first, anchors_for(targets), targets, cfg)
    return KeyframeSet([score], status="ok", strategy="first")


# Background integrity

def luma(pixels: np.ndarray) -> np.ndarray:
    """[3, H, W] in [0, 1] -> grayscale [H, W] in [0, 255]."""
    return np.tensordot(LUMA, pixels.astype(np.float64), axes=(0, 0)) * 255.0


def sobel_edge_map(image: np.ndarray) -> np.ndarray:
    """Gradient magnitude with 3x3 Sobel kernels and replicated borders."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 3 or image.shape[1] < 3:
        raise ShapeError(f"Sobel needs a 2-D image of at least 3x3, got {image.shape}")
    gx = ndimage.correlate(image, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(image, SOBEL_Y, mode="nearest")
    return np.hypot(gx, gy)


def clarity_from_edges(edges: np.ndarray, background: np.ndarray, threshold: float = 50.0) -> float:
    n_background = int(background.sum())
    if n_background == 0:
        logger.warning("Empty background region; clarity is 0")
        return 0.0
    strong = (edges > threshold) & background
    if not strong.any():
        return 0.0
    return (strong.sum() / n_background) * (edges[strong].mean() / 255.0)


def clarity(frame: Frame, threshold: float = 50.0) -> float:
    background = frame.human_mask < 0.5
    masked = frame.pixels * background[None].astype(frame.pixels.dtype)
    return float(clarity_from_edges(sobel_edge_map(luma(masked)), background, threshold))


def background_ratio(frame: Frame) -> float:
    h, w = frame.human_mask.shape
    return float((frame.human_mask < 0.5).sum()) / (h * w)


def background_integrity_score(frame: Frame, threshold: float = 50.0) -> float:
    ratio = background_ratio(frame)
    if ratio == 0:
        return 0.0
    return ratio * clarity(frame, threshold)


def write_score_report(path: Path, scores: Sequence[FrameScore], keyframes: KeyframeSet):
    chosen = {s.index: s for s in keyframes.selected}
    lines = ["index\ttimestamp\ts_ins\ts_m\ts_r\tocclusion\tinitial\ttemporal\tfinal\tselected"]
    for s in scores:
        picked = chosen.get(s.index)
        temporal = picked.temporal_score if picked else s.temporal_score
        final = picked.final_score if picked else s.final_score
        lines.append(f"{s.index}\t{s.timestamp:.6f}\t{s.s_ins:.6f}\t{s.s_m:.6f}\t{s.s_r:.6f}\t"
                     f"{s.occlusion_ratio:.6f}\t{s.initial_score:.6f}\t{temporal:.6f}\t{final:.6f}\t"
                     f"{int(picked is not None)}")
    lines.append(f"# status={keyframes.status} strategy={keyframes.strategy} "
                 f"t_thres={keyframes.t_thres:.6f} selected={','.join(map(str, keyframes.indices))}")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write report {path}: {e}") from e
