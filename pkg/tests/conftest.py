import math

import numpy as np
import pytest

from config import RunConfig, ScoringMode
from gradcheck import tiny_model_config
from keyframe import BONES, Frame, SkeletonPose, generate_anchor_pose
from numerics import SeededRng
from synth import generate_scene, random_scene_spec

SOBEL_TAPS = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


@pytest.fixture(scope="session")
def small_sample():
    """An 8-frame 32x32 scene; enough for keyframes, latents and a tiny model."""
    return generate_scene(random_scene_spec(7, frames=8, size=32))


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_run(tiny_cfg, tmp_path):
    return RunConfig(command="test", out=tmp_path, model=tiny_cfg,
                     train={"steps": 3, "inference_steps": 2, "log_every": 1})


@pytest.fixture
def rng():
    return SeededRng(1234, "tests")


def make_frame(index=0, timestamp=0.0, size=16, garment=None, human=None, occluded=None, pose="front",
               labels=frozenset(), pixels=None):
    garment = np.zeros((size, size)) if garment is None else garment
    human = np.maximum(garment, np.zeros((size, size))) if human is None else human
    occluded = np.zeros((size, size)) if occluded is None else occluded
    pixels = np.full((3, size, size), 0.5) if pixels is None else pixels
    joints = generate_anchor_pose(pose).joints if isinstance(pose, str) else pose
    return Frame(index=index, timestamp=timestamp, pixels=pixels, garment_mask=garment, human_mask=human,
                 occluded_garment_mask=occluded, pose=SkeletonPose(joints), labels=frozenset(labels))


def direct_motion_score(joints, anchor_joints):
    """S_m from explicit per-bone unit vectors and dot products."""
    worst = 1.0
    for anchor in anchor_joints:
        dot = own_sq = other_sq = 0.0
        shared = 0
        for a, b in BONES:
            ux, uy = joints[b][0] - joints[a][0], joints[b][1] - joints[a][1]
            vx, vy = anchor[b][0] - anchor[a][0], anchor[b][1] - anchor[a][1]
            nu, nv = math.hypot(ux, uy), math.hypot(vx, vy)
            if nu <= 1e-9 or nv <= 1e-9:
                continue
            ux, uy, vx, vy = ux / nu, uy / nu, vx / nv, vy / nv
            dot += ux * vx + uy * vy
            own_sq += ux * ux + uy * uy
            other_sq += vx * vx + vy * vy
            shared += 1
        if shared == 0:
            return 0.0
        cos = dot / math.sqrt(own_sq * other_sq)
        worst = min(worst, min(1.0, max(0.0, (1.0 + cos) / 2.0)))
    return worst


def direct_initial_score(frame, targets, cfg):
    """(initial score, occlusion ratio) computed straight from the frame."""
    wanted = set(targets.all)
    s_ins = len(wanted & set(frame.labels)) / len(wanted) if frame.labels else 0.0
    s_m = direct_motion_score(frame.pose.joints, [generate_anchor_pose(t).joints for t in targets.all])
    h, w = frame.garment_mask.shape
    s_r = float(frame.garment_mask.sum()) / (h * w)
    area = float(frame.garment_mask.sum())
    occlusion = 1.0 if area == 0 else min(1.0, float(frame.occluded_garment_mask.sum()) / area)
    if cfg.scoring_mode == ScoringMode.EQ1:
        initial = 1.0 - s_m + cfg.lambda_ * s_r
    else:
        initial = cfg.w1 * s_ins + cfg.w2 * (1.0 - s_m) + cfg.w3 * s_r + cfg.w4
    return initial, occlusion


def reference_selection(frames, targets, cfg, t_thres):
    """Straight-line restatement of the greedy keyframe selection, scoring each frame itself."""
    scored = []
    for f in frames:
        initial, occlusion = direct_initial_score(f, targets, cfg)
        if occlusion <= cfg.occlu_thres:
            scored.append((initial, f.index, f.timestamp))
    scored.sort(key=lambda s: (-s[0], s[1]))
    chosen = []
    for initial, index, stamp in scored:
        if len(chosen) == cfg.k_max:
            break
        if chosen:
            gap = min(abs(stamp - c[2]) for c in chosen)
            final = initial * (gap / t_thres)
            if gap < t_thres or min(abs(final - c[0]) for c in chosen) < cfg.score_diff_min:
                continue
        chosen.append((initial, index, stamp))
    return [index for _, index, _ in chosen]


def direct_sobel(image):
    """Gradient magnitude from explicit 3x3 taps over an edge-replicated border."""
    padded = np.pad(np.asarray(image, dtype=np.float64), 1, mode="edge")
    h, w = image.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for di in range(3):
        for dj in range(3):
            patch = padded[di:di + h, dj:dj + w]
            gx += SOBEL_TAPS[di][dj] * patch
            gy += SOBEL_TAPS[dj][di] * patch
    return np.sqrt(gx ** 2 + gy ** 2)


def direct_clarity(pixels, human_mask, threshold=50.0):
    """Strong-edge ratio of the background times the mean strong edge / 255."""
    background = human_mask < 0.5
    n = int(background.sum())
    if n == 0:
        return 0.0
    gray = (0.299 * pixels[0] + 0.587 * pixels[1] + 0.114 * pixels[2]) * background * 255.0
    edges = direct_sobel(gray)
    strong = (edges > threshold) & background
    if not strong.any():
        return 0.0
    return (strong.sum() / n) * (edges[strong].mean() / 255.0)


def direct_background_integrity(pixels, human_mask, threshold=50.0):
    """S_bg = background ratio × clarity."""
    background = human_mask < 0.5
    return background.mean() * direct_clarity(pixels, human_mask, threshold)
