"""
End-to-end wiring: sample -> keyframes -> conditioning latents -> model.

Each ``run_*`` function backs one CLI command and writes its outputs under
the given directory; the functions above them are the reusable steps.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

import ktsr
from config import AblationConfig, RunConfig, SamplerConfig
from dit import KeyTailorModel, decode, load_checkpoint, parameter_checksum, save_checkpoint
from errors import NumericError, StorageError
from flow import TrainResult, denoise, fit
from keyframe import (FrameScore, InstructionTargets, KeyframeSet, first_frame_keyframes, parse_instruction,
                      random_keyframes, score_frames, select_keyframes, write_score_report)
from latents import (ImageEncoder, LatentBundle, SampleConditions, background_keyframe_latent,
                     extract_keyframe_garment_latents, first_frame_tryon, mask_latent)
from metrics import MetricReport, evaluate_videos, ssim
from numerics import SeededRng, no_grad
from synth import SyntheticSample, read_sample

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ktckpt"
LAST_GOOD_NAME = "last_good.ktckpt"
LOSS_LOG_NAME = "loss.tsv"
FRAMES_NAME = "frames.ktsr"
LATENT_NAME = "latent.ktsr"
KEYFRAMES_NAME = "keyframes.tsv"
SCORES_NAME = "scores.tsv"
METRICS_NAME = "metrics.tsv"
ECHO_NAME = "ablation_echo.tsv"

# Bundle roles each toggle is allowed to change relative to the full pipeline
DECLARED_PATHS: Dict[str, Tuple[str, ...]] = {
    "no_cbdo": ("background",),
    "no_keybg": ("background",),
    "no_fusion": ("background", "extra"),
    "no_distill": ("garment",),
    "no_gdde": ("garment", "keyframe_mean"),
    "no_qkey": ("keyframe_mean",),
    "no_iks": ("garment", "keyframe_mean", "background"),
    "keyframes_1": ("garment", "keyframe_mean", "background"),
    "no_sr": ("garment", "keyframe_mean", "background"),
}
ECHO_VARIANTS = ("no_cbdo", "no_gdde", "keyframes_1")


def load_sample(path: Path) -> SyntheticSample:
    if path is None:
        raise StorageError("no sample directory given (--sample)")
    return read_sample(Path(path))


# Keyframes

def sampler_for(cfg: SamplerConfig, ablation: AblationConfig) -> SamplerConfig:
    """Scoring weights with the instruction and garment-ratio terms removed under no_sr."""
    if ablation.no_sr:
        return cfg.model_copy(update={"w1": 0.0, "w3": 0.0, "lambda_": 0.0})
    return cfg


def choose_keyframes(sample: SyntheticSample, run: RunConfig) -> Tuple[InstructionTargets, KeyframeSet]:
    targets = parse_instruction(run.instruction, run.sampler.parser)
    sampler = sampler_for(run.sampler, run.ablation)
    if run.ablation.no_iks:
        keyframes = random_keyframes(sample.frames, targets, sampler, SeededRng(run.seed, "keyframes"),
                                     count=sampler.k_max)
    elif run.ablation.keyframes_1:
        keyframes = first_frame_keyframes(sample.frames, targets, sampler)
    else:
        keyframes = select_keyframes(sample.frames, targets, sampler)
    if not keyframes.selected:
        logger.warning("No keyframe passed selection; falling back to the first frame")
        keyframes = replace(first_frame_keyframes(sample.frames, targets, sampler), strategy="fallback",
                            status="empty")
    return targets, keyframes


def render_scores(scores: Sequence[FrameScore], keyframes: Optional[KeyframeSet] = None,
                  console: Console = None):
    chosen = set(keyframes.indices) if keyframes is not None else set()
    table = Table(title="Frame scores")
    for column in ("frame", "t", "S_ins", "S_m", "S_r", "occl.", "score", "key"):
        table.add_column(column, justify="right")
    for s in scores:
        table.add_row(str(s.index), f"{s.timestamp:.3f}", f"{s.s_ins:.3f}", f"{s.s_m:.3f}", f"{s.s_r:.3f}",
                      f"{s.occlusion_ratio:.3f}", f"{s.initial_score:.4f}", "*" if s.index in chosen else "")
    (console or Console()).print(table)


def run_sample_keyframes(run: RunConfig, out: Path, show: bool = True) -> KeyframeSet:
    sample = load_sample(run.sample)
    targets, keyframes = choose_keyframes(sample, run)
    scores = score_frames(sample.frames, targets, sampler_for(run.sampler, run.ablation))
    write_score_report(Path(out) / KEYFRAMES_NAME, scores, keyframes)
    if show:
        render_scores(scores, keyframes)
    return keyframes


def run_score_frames(run: RunConfig, out: Path, show: bool = True) -> List[FrameScore]:
    sample = load_sample(run.sample)
    targets = parse_instruction(run.instruction, run.sampler.parser)
    scores = score_frames(sample.frames, targets, sampler_for(run.sampler, run.ablation))
    write_score_report(Path(out) / SCORES_NAME, scores, KeyframeSet([], status="unselected", strategy="none"))
    if show:
        render_scores(scores)
    return scores


# Conditions

def build_encoder(run: RunConfig) -> ImageEncoder:
    return ImageEncoder(run.model.latent_channels, run.model.seed)


def prepare_conditions(sample: SyntheticSample, keyframes: KeyframeSet, encoder: ImageEncoder,
                       run: RunConfig) -> SampleConditions:
    """Parameter-free conditioning inputs of one sample."""
    masks = sample.agnostic_masks
    tryon = first_frame_tryon(sample.agnostic[:, 0], sample.garment_ref, masks[0])
    key_background, background_index = None, None
    if not run.ablation.no_keybg:
        key_background, background_index = background_keyframe_latent(
            keyframes, sample.frames, encoder, run.sampler.clarity_threshold)
    return SampleConditions(
        pose_video=sample.pose_maps,
        agnostic_video=sample.agnostic,
        mask_latent=mask_latent(masks),
        garment_latent=encoder.encode(tryon),
        reference_latent=encoder.encode(sample.garment_ref),
        keyframe_latents=extract_keyframe_garment_latents(keyframes, sample.frames, encoder),
        key_background=key_background,
        frames=sample.num_frames,
        keyframe_indices=tuple(keyframes.indices),
        background_index=background_index,
    )


def target_latent(sample: SyntheticSample, encoder: ImageEncoder) -> np.ndarray:
    return encoder.encode_video(sample.video)


def build_model(run: RunConfig, checkpoint: Optional[Path] = None) -> KeyTailorModel:
    model = KeyTailorModel(run.model, run.ablation)
    if checkpoint is not None:
        load_checkpoint(model, checkpoint)
    return model


# Training

@dataclass
class TrainOutputs:
    result: TrainResult
    checkpoint: Path
    loss_log: Path
    initial_checksum: str
    final_checksum: str
    model: KeyTailorModel


def run_training(run: RunConfig, out: Path) -> TrainOutputs:
    out = Path(out)
    sample = load_sample(run.sample)
    encoder = build_encoder(run)
    _, keyframes = choose_keyframes(sample, run)
    cond = prepare_conditions(sample, keyframes, encoder, run)
    x1 = target_latent(sample, encoder)
    model = build_model(run)
    initial = parameter_checksum(model)

    loss_log = out / LOSS_LOG_NAME
    checkpoint = Path(run.checkpoint) if run.checkpoint is not None else out / CHECKPOINT_NAME
    try:
        out.mkdir(parents=True, exist_ok=True)
        log = open(loss_log, "w", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot open loss log {loss_log}: {e}") from e
    with log:
        log.write("step\tloss\n")

        def record(step: int, loss: float):
            log.write(f"{step}\t{loss:.8f}\n")
            log.flush()

        try:
            result = fit(model, cond, x1, run.train, on_step=record)
        except NumericError:
            save_checkpoint(model, out / LAST_GOOD_NAME)
            logger.error(f"Last good parameters saved to {out / LAST_GOOD_NAME}")
            raise
    save_checkpoint(model, checkpoint)
    return TrainOutputs(result, checkpoint, loss_log, initial, parameter_checksum(model), model)


# Inference

def infer_latent(model: KeyTailorModel, cond: SampleConditions, steps: int, seed: int) -> np.ndarray:
    with no_grad():
        bundle = model.encode_conditions(cond)
    return denoise(model, bundle, steps, seed)


def run_inference(run: RunConfig, out: Path, steps: Optional[int] = None) -> Path:
    out = Path(out)
    steps = steps or run.train.inference_steps
    sample = load_sample(run.sample)
    encoder = build_encoder(run)
    targets, keyframes = choose_keyframes(sample, run)
    if run.checkpoint is None:
        logger.warning("No checkpoint given; sampling from the untrained model")
    model = build_model(run, run.checkpoint)
    cond = prepare_conditions(sample, keyframes, encoder, run)
    latent = infer_latent(model, cond, steps, run.seed)
    frames = np.clip(decode(latent, encoder, sample.num_frames), 0.0, 1.0)
    ktsr.write_tensor(out / LATENT_NAME, latent.astype(np.float32))
    ktsr.write_tensor(out / FRAMES_NAME, frames.astype(np.float32))
    scores = score_frames(sample.frames, targets, sampler_for(run.sampler, run.ablation))
    write_score_report(out / KEYFRAMES_NAME, scores, keyframes)
    logger.info(f"Wrote {sample.num_frames} frames to {out / FRAMES_NAME}")
    return out / FRAMES_NAME


# Evaluation

def load_video(path: Path) -> np.ndarray:
    """A KTSR video file, or the source video of a sample directory."""
    path = Path(path)
    if path.is_dir():
        return read_sample(path).video
    return ktsr.read_tensor(path)


def run_eval(generated: Path, reference: Path, out: Path, threads: int = 1, show: bool = True) -> MetricReport:
    report = evaluate_videos(load_video(generated), load_video(reference), threads)
    report.write(Path(out) / METRICS_NAME)
    if show:
        report.render()
    return report


# Ablation audits

def activation_diff(a: LatentBundle, b: LatentBundle, atol: float = 0.0) -> Dict[str, float]:
    """Largest absolute difference per bundle role; inf when a role exists on one side only."""
    diffs = {}
    left, right = a.roles(), b.roles()
    for role in LatentBundle.ROLES:
        x, y = left[role], right[role]
        if x is None and y is None:
            diffs[role] = 0.0
        elif x is None or y is None or x.shape != y.shape:
            diffs[role] = float("inf")
        else:
            diffs[role] = float(np.abs(x.astype(np.float64) - y).max(initial=0.0))
    return {role: d for role, d in diffs.items() if d > atol}


@dataclass
class AuditResult:
    toggle: str
    changed: Dict[str, float]
    declared: Tuple[str, ...]

    @property
    def ok(self) -> bool:
        return set(self.changed) <= set(self.declared)


def _bundle_for(sample: SyntheticSample, run: RunConfig, encoder: ImageEncoder) -> LatentBundle:
    _, keyframes = choose_keyframes(sample, run)
    cond = prepare_conditions(sample, keyframes, encoder, run)
    with no_grad():
        return build_model(run).encode_conditions(cond)


def audit_ablation(sample: SyntheticSample, run: RunConfig, toggle: str) -> AuditResult:
    """Compare the conditioning bundle of the full pipeline with one toggle switched on."""
    encoder = build_encoder(run)
    base_run = run.model_copy(update={"ablation": AblationConfig()})
    variant_run = run.model_copy(update={"ablation": AblationConfig(**{toggle: True})})
    changed = activation_diff(_bundle_for(sample, base_run, encoder), _bundle_for(sample, variant_run, encoder))
    result = AuditResult(toggle, changed, DECLARED_PATHS[toggle])
    if not result.ok:
        logger.warning(f"--{toggle.replace('_', '-')} changed undeclared roles {sorted(changed)}")
    return result


def pipeline_ssim(sample: SyntheticSample, run: RunConfig) -> Tuple[float, TrainResult]:
    """Train on the sample, sample it back and score it against the source video."""
    encoder = build_encoder(run)
    _, keyframes = choose_keyframes(sample, run)
    cond = prepare_conditions(sample, keyframes, encoder, run)
    model = build_model(run)
    result = fit(model, cond, target_latent(sample, encoder), run.train)
    latent = infer_latent(model, cond, run.train.inference_steps, run.seed)
    frames = np.clip(decode(latent, encoder, sample.num_frames), 0.0, 1.0)
    scores = [ssim(frames[:, t], sample.video[:, t]) for t in range(sample.num_frames)]
    return float(np.mean(scores)), result


def run_ablation_echo(run: RunConfig, out: Path, variants: Sequence[str] = ECHO_VARIANTS) -> List[Tuple[str, float]]:
    """
    Full pipeline SSIM against each variant trained identically.

    A variant scoring above the full pipeline is reported as a warning; it
    never fails the command.
    """
    sample = load_sample(run.sample)
    rows = []
    for name in ("full",) + tuple(variants):
        ablation = AblationConfig() if name == "full" else AblationConfig(**{name: True})
        score, result = pipeline_ssim(sample, run.model_copy(update={"ablation": ablation}))
        logger.info(f"{name}: SSIM {score:.4f}, eval loss {result.final_eval:.6f}")
        rows.append((name, score, result.final_eval))
    full = rows[0][1]
    lines = ["variant\tssim\teval_loss\tordered"]
    for name, score, loss in rows:
        ordered = name == "full" or full >= score
        if not ordered:
            logger.warning(f"Ablation {name} scored SSIM {score:.4f} above the full pipeline {full:.4f}")
        lines.append(f"{name}\t{score:.6f}\t{loss:.6f}\t{int(ordered)}")
    path = Path(out) / ECHO_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return [(name, score) for name, score, _ in rows]
