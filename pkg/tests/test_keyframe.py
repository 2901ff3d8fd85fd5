import numpy as np
import pytest

from conftest import (direct_background_integrity, direct_clarity, direct_motion_score, make_frame,
                      reference_selection)
from config import SamplerConfig, ScoringMode
from errors import EmptyTargetsError, ShapeError, UsageError
from keyframe import (InstructionTargets, SkeletonPose, anchors_for, background_integrity_score, clarity,
                      clarity_from_edges, default_t_thres, first_frame_keyframes, frame_score, garment_area_ratio,
                      generate_anchor_pose, motion_difference_score, occlusion_ratio, parse_instruction,
                      random_keyframes, score_frames, select_keyframes, sobel_edge_map, write_score_report)
from numerics import SeededRng

TARGETS = InstructionTargets(("front", "back"), ("raise-hand",))


def block_mask(size, rows):
    mask = np.zeros((size, size))
    mask[size // 4:size // 4 + rows, size // 4:3 * size // 4] = 1.0
    return mask


def test_parse_default_instruction():
    targets = parse_instruction("Show front and back of clothes, raise hand to display sleeves")
    assert targets.views == ("front", "back")
    assert targets.actions == ("raise-hand",)


def test_parse_without_keywords():
    with pytest.raises(EmptyTargetsError):
        parse_instruction("make it look nice")


def test_anchor_poses_have_coco_layout():
    for target in ("front", "back", "left", "right", "raise-hand", "turn", "walk"):
        assert generate_anchor_pose(target).joints.shape == (17, 2)


def test_motion_score_identical_pose_is_one():
    frame = make_frame(pose="front")
    assert motion_difference_score(frame, [generate_anchor_pose("front")]) == pytest.approx(1.0)


def test_motion_score_takes_worst_anchor():
    frame = make_frame(pose="front")
    anchors = anchors_for(TARGETS)
    each = [motion_difference_score(frame, [a]) for a in anchors]
    assert motion_difference_score(frame, anchors) == pytest.approx(min(each))


def test_motion_score_reversed_bones_is_zero():
    joints = generate_anchor_pose("front").joints
    flipped = SkeletonPose(2 * joints.mean(axis=0) - joints)
    assert motion_difference_score(flipped, [SkeletonPose(joints)]) == pytest.approx(0.0, abs=1e-9)


def test_motion_score_degenerate_pose():
    collapsed = SkeletonPose(np.full((17, 2), 0.5))
    assert motion_difference_score(collapsed, [generate_anchor_pose("front")]) == 0.0


def test_motion_score_needs_anchor():
    with pytest.raises(UsageError):
        motion_difference_score(make_frame(), [])


@pytest.mark.parametrize("seed", range(100))
def test_motion_score_matches_bone_dot_products(seed):
    rng = np.random.default_rng(seed)
    joints = rng.random((17, 2))
    # collapse a couple of bones now and then
    if seed % 3 == 0:
        joints[rng.integers(17)] = joints[rng.integers(17)]
    anchors = [generate_anchor_pose(t) for t in rng.choice(["front", "back", "left", "right", "walk"], 2)]
    got = motion_difference_score(SkeletonPose(joints), anchors)
    assert got == pytest.approx(direct_motion_score(joints, [a.joints for a in anchors]), abs=1e-12)


def test_skeleton_shape_checked():
    with pytest.raises(ShapeError):
        SkeletonPose(np.zeros((16, 2)))


def test_area_and_occlusion_ratios():
    garment = block_mask(16, 4)
    occluded = np.zeros((16, 16))
    occluded[4, 4:12] = 1.0
    frame = make_frame(garment=garment, occluded=occluded)
    assert garment_area_ratio(frame) == pytest.approx(32 / 256)
    assert occlusion_ratio(frame) == pytest.approx(8 / 32)
    assert occlusion_ratio(make_frame()) == 1.0


def test_algorithm_score_formula():
    cfg = SamplerConfig()
    frame = make_frame(garment=block_mask(16, 4), labels={"front"})
    anchors = anchors_for(TARGETS)
    score = frame_score(frame, anchors, TARGETS, cfg)
    s_m = motion_difference_score(frame, anchors)
    assert score.s_ins == pytest.approx(1 / 3)
    expected = 0.3 * (1 / 3) + 0.2 * (1 - s_m) + 0.3 * (32 / 256) + 0.2
    assert score.initial_score == pytest.approx(expected)


def test_eq1_score_formula():
    cfg = SamplerConfig(scoring_mode=ScoringMode.EQ1)
    frame = make_frame(garment=block_mask(16, 8))
    anchors = anchors_for(TARGETS)
    score = frame_score(frame, anchors, TARGETS, cfg)
    assert score.initial_score == pytest.approx(1 - score.s_m + 0.5 * (64 / 256))


def test_default_t_thres_is_fifth_of_duration():
    frames = [make_frame(i, i * 0.5) for i in range(11)]
    assert default_t_thres(frames) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_selection_matches_reference(seed):
    rng = np.random.default_rng(seed)
    poses = ["front", "back", "left", "right", "raise-hand", "turn", "walk"]
    frames = []
    for i in range(16):
        garment = block_mask(16, int(rng.integers(1, 9)))
        occluded = garment * (rng.random((16, 16)) < rng.choice([0.0, 0.5]))
        labels = set(rng.choice(["front", "back", "raise-hand", "walk"], size=int(rng.integers(0, 3))))
        frames.append(make_frame(i, i / 8, garment=garment, occluded=occluded,
                                 pose=poses[int(rng.integers(len(poses)))], labels=labels))
    cfg = SamplerConfig()
    result = select_keyframes(frames, TARGETS, cfg)
    expected = reference_selection(frames, TARGETS, cfg, default_t_thres(frames))
    assert result.indices == expected
    assert len(result) <= cfg.k_max
    for picked in result.selected:
        assert picked.occlusion_ratio <= cfg.occlu_thres


def test_selected_frames_respect_time_gap():
    frames = [make_frame(i, float(i), garment=block_mask(16, 8 if i in (3, 4) else 2), labels={"front"})
              for i in range(11)]
    result = select_keyframes(frames, TARGETS, SamplerConfig())
    stamps = sorted(s.timestamp for s in result.selected)
    assert all(b - a >= 2.0 for a, b in zip(stamps, stamps[1:]))
    assert not {3, 4} <= set(result.indices)


def test_all_frames_occluded_gives_empty_set():
    garment = block_mask(16, 4)
    frames = [make_frame(i, float(i), garment=garment, occluded=garment) for i in range(4)]
    result = select_keyframes(frames, TARGETS, SamplerConfig())
    assert result.status == "empty"
    assert len(result) == 0


def test_selection_needs_frames():
    with pytest.raises(UsageError):
        select_keyframes([], TARGETS, SamplerConfig())


def test_random_keyframes_are_seeded():
    frames = [make_frame(i, float(i), garment=block_mask(16, 2)) for i in range(10)]
    cfg = SamplerConfig()
    a = random_keyframes(frames, TARGETS, cfg, SeededRng(4, "keyframes"))
    b = random_keyframes(frames, TARGETS, cfg, SeededRng(4, "keyframes"))
    assert a.indices == b.indices
    assert len(set(a.indices)) == 3
    assert a.strategy == "random"


def test_first_frame_strategy():
    frames = [make_frame(i, float(i), garment=block_mask(16, 2)) for i in (5, 2, 9)]
    result = first_frame_keyframes(frames, TARGETS, SamplerConfig())
    assert result.indices == [2]
    assert result.strategy == "first"


def test_sobel_step_edge():
    image = np.zeros((8, 8))
    image[:, 4:] = 255.0
    edges = sobel_edge_map(image)
    np.testing.assert_allclose(edges[:, 3], 1020.0)
    np.testing.assert_allclose(edges[:, 4], 1020.0)
    np.testing.assert_allclose(edges[:, :2], 0.0)


def test_sobel_rejects_tiny_images():
    with pytest.raises(ShapeError):
        sobel_edge_map(np.zeros((2, 8)))


def test_clarity_from_edges_oracle():
    edges = np.array([[10.0, 60.0], [100.0, 255.0]])
    background = np.array([[True, True], [True, False]])
    # strong background pixels: 60 and 100
    assert clarity_from_edges(edges, background) == pytest.approx((2 / 3) * (80.0 / 255.0))
    assert clarity_from_edges(edges, np.zeros((2, 2), dtype=bool)) == 0.0


def test_background_integrity():
    size = 16
    full = make_frame(human=np.ones((size, size)))
    assert background_integrity_score(full) == 0.0
    pixels = np.zeros((3, size, size))
    pixels[:, :, ::4] = 1.0
    human = np.zeros((size, size))
    human[4:12, 4:12] = 1.0
    stripes = make_frame(human=human, pixels=pixels)
    assert background_integrity_score(stripes) > 0.0


def textured_frame(seed, size=32):
    rng = np.random.default_rng(seed)
    pixels = rng.random((3, size, size))
    human = np.zeros((size, size))
    top, left = rng.integers(0, size // 2, 2)
    human[top:top + size // 2, left:left + int(rng.integers(2, size // 2))] = 1.0
    return make_frame(size=size, human=human, pixels=pixels)


@pytest.mark.parametrize("seed", range(50))
def test_clarity_on_random_background(seed):
    frame = textured_frame(seed)
    assert clarity(frame) == pytest.approx(direct_clarity(frame.pixels, frame.human_mask), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_background_integrity_formula(seed):
    frame = textured_frame(seed)
    assert background_integrity_score(frame) == pytest.approx(
        direct_background_integrity(frame.pixels, frame.human_mask), rel=1e-9, abs=1e-12)


def test_score_report(tmp_path):
    frames = [make_frame(i, float(i), garment=block_mask(16, 2 + i)) for i in range(4)]
    cfg = SamplerConfig()
    scores = score_frames(frames, TARGETS, cfg)
    result = select_keyframes(frames, TARGETS, cfg)
    path = tmp_path / "scores.tsv"
    write_score_report(path, scores, result)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("index\ttimestamp")
    assert len(lines) == 6
    assert lines[-1].startswith("# status=ok")
    flagged = [int(line.split("\t")[0]) for line in lines[1:-1] if line.endswith("\t1")]
    assert flagged == sorted(result.indices)
