"""
KeyTailor command-line entry point.

    python main.py gen-synthetic --seeds 1..50 --frames 16 --size 64 --out data
    python main.py sample-keyframes --sample data/sample_0001 --out runs/kf
    python main.py train --sample data/sample_0001 --steps 200 --out runs/train
    python main.py infer --checkpoint runs/train/checkpoint.ktckpt --sample data/sample_0001 --out runs/infer
    python main.py eval --generated runs/infer/frames.ktsr --reference data/sample_0001 --out runs/eval
    python main.py gradcheck --scope layer

Global options (``--config``, ``--verbose``) go before the command name.
"""
import functools
import logging
import re
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional

import typer
from rich.console import Console
from rich.table import Table

import config
import gradcheck
import pipeline
import synth
from errors import ConfigurationError, KeyTailorError, NumericError

# Configure logging first
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="Keyframe-driven video try-on pipeline at desk scale.")
console = Console()


class State:
    config_path: Optional[Path] = None


state = State()


def handled(command):
    """Log pipeline errors once and exit with their mapped code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except KeyTailorError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise typer.Exit(code=e.exit_code)
        except typer.Exit:
            raise
        except Exception as e:
            logger.error(f"Unhandled exception: {e}")
            logger.error(traceback.format_exc())
            raise typer.Exit(code=1)

    return wrapper


@app.callback()
def main(
    config_path: Optional[Path] = typer.Option(None, "--config", help="YAML file with RunConfig values."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level."),
):
    state.config_path = config_path
    settings_level = "DEBUG" if verbose else None
    if settings_level is None:
        try:
            settings_level = config.get_settings().log_level.upper()
        except ConfigurationError:
            settings_level = "INFO"
    logging.getLogger().setLevel(settings_level)


def _ablation_overrides(values: Dict[str, bool]) -> Dict[str, bool]:
    return {name: True for name, on in values.items() if on}


def _set_only(values: Dict[str, Any]) -> Dict[str, Any]:
    return {key: value for key, value in values.items() if value is not None}


def _resolve(command: str, overrides: Dict[str, Any]) -> config.RunConfig:
    run = config.resolve_run_config(command, state.config_path, overrides)
    if state.config_path is not None:
        logger.info(f"Using configuration file {state.config_path}")
    else:
        logger.info("Using built-in defaults (no --config)")
    return run


def _out_dir(run: config.RunConfig, default: str) -> Path:
    out = Path(run.out) if run.out is not None else Path(default)
    config.write_resolved_config(run, out)
    return out


def _threads() -> int:
    return config.get_settings().threads


def parse_seeds(text: str) -> List[int]:
    """'1..50', '3-7', '1,4,9' or a mix of these."""
    seeds: List[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        match = re.fullmatch(r"(\d+)\s*(?:\.\.|-)\s*(\d+)", part)
        if match:
            lo, hi = int(match.group(1)), int(match.group(2))
            if hi < lo:
                raise ConfigurationError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part.isdigit():
            seeds.append(int(part))
        else:
            raise ConfigurationError(f"cannot parse seeds {text!r}")
    if not seeds:
        raise ConfigurationError("no seeds given")
    return seeds


def show_defaults():
    table = Table(title="Published defaults")
    table.add_column("key")
    table.add_column("value", justify="right")
    table.add_column("origin")
    for key, value, origin in config.DEFAULTS_TABLE:
        table.add_row(key, str(value), origin)
    console.print(table)


@app.command("gen-synthetic")
@handled
def gen_synthetic(
    seeds: Optional[str] = typer.Option(None, "--seeds", help="Seed list, e.g. 1..50 or 1,2,3."),
    frames: Optional[int] = typer.Option(None, "--frames"),
    size: Optional[int] = typer.Option(None, "--size"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Write one synthetic sample directory per seed."""
    corpus = {"frames": frames, "size": size}
    if seeds is not None:
        corpus["seeds"] = parse_seeds(seeds)
    run = _resolve("gen-synthetic", {"out": out, "corpus": corpus})
    out_dir = _out_dir(run, "data")
    paths = synth.generate_corpus(run.corpus.seeds, run.corpus.frames, run.corpus.size, out_dir,
                                  threads=_threads(), fps=run.corpus.fps)
    logger.info(f"Generated {len(paths)} samples under {out_dir}")


@app.command("sample-keyframes")
@handled
def sample_keyframes(
    sample: Optional[Path] = typer.Option(None, "--sample", "--video"),
    out: Optional[Path] = typer.Option(None, "--out"),
    instruction: Optional[str] = typer.Option(None, "--instruction"),
    mode: Optional[config.ScoringMode] = typer.Option(None, "--mode"),
    k_max: Optional[int] = typer.Option(None, "--k-max"),
    show_config: bool = typer.Option(False, "--show-config", help="Print the published defaults first."),
    no_iks: bool = typer.Option(False, "--no-iks"),
    keyframes_1: bool = typer.Option(False, "--keyframes-1"),
    no_sr: bool = typer.Option(False, "--no-sr"),
):
    """Select keyframes and write the score breakdown."""
    if show_config:
        show_defaults()
    run = _resolve("sample-keyframes", {
        "sample": sample, "out": out, "instruction": instruction,
        "sampler": _set_only({"scoring_mode": mode, "k_max": k_max}),
        "ablation": _ablation_overrides({"no_iks": no_iks, "keyframes_1": keyframes_1, "no_sr": no_sr}),
    })
    keyframes = pipeline.run_sample_keyframes(run, _out_dir(run, "runs/keyframes"))
    logger.info(f"Keyframes {keyframes.indices} ({keyframes.strategy}, status {keyframes.status})")


@app.command("score-frames")
@handled
def score_frames(
    sample: Optional[Path] = typer.Option(None, "--sample", "--video"),
    out: Optional[Path] = typer.Option(None, "--out"),
    instruction: Optional[str] = typer.Option(None, "--instruction"),
    mode: Optional[config.ScoringMode] = typer.Option(None, "--mode"),
    show_config: bool = typer.Option(False, "--show-config"),
):
    """Score every frame without selecting keyframes."""
    if show_config:
        show_defaults()
    run = _resolve("score-frames", {
        "sample": sample, "out": out, "instruction": instruction,
        "sampler": _set_only({"scoring_mode": mode}),
    })
    pipeline.run_score_frames(run, _out_dir(run, "runs/scores"))


@app.command("train")
@handled
def train(
    sample: Optional[Path] = typer.Option(None, "--sample"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    checkpoint_out: Optional[Path] = typer.Option(None, "--checkpoint-out"),
    out: Optional[Path] = typer.Option(None, "--out"),
    no_iks: bool = typer.Option(False, "--no-iks"),
    no_distill: bool = typer.Option(False, "--no-distill"),
    no_qkey: bool = typer.Option(False, "--no-qkey"),
    no_keybg: bool = typer.Option(False, "--no-keybg"),
    no_fusion: bool = typer.Option(False, "--no-fusion"),
    no_cbdo: bool = typer.Option(False, "--no-cbdo"),
    no_gdde: bool = typer.Option(False, "--no-gdde"),
    keyframes_1: bool = typer.Option(False, "--keyframes-1"),
    no_sr: bool = typer.Option(False, "--no-sr"),
):
    """Fit the trainable conditioning and adapters on one sample."""
    toggles = dict(no_iks=no_iks, no_distill=no_distill, no_qkey=no_qkey, no_keybg=no_keybg, no_fusion=no_fusion,
                   no_cbdo=no_cbdo, no_gdde=no_gdde, keyframes_1=keyframes_1, no_sr=no_sr)
    run = _resolve("train", {
        "sample": sample, "checkpoint": checkpoint_out, "out": out, "seed": seed,
        "train": {"steps": steps, "lr": lr, "seed": seed},
        "ablation": _ablation_overrides(toggles),
    })
    outputs = pipeline.run_training(run, _out_dir(run, "runs/train"))
    console.print(f"checkpoint: {outputs.checkpoint}\nloss log: {outputs.loss_log}\n"
                  f"eval loss: {outputs.result.initial_eval:.6f} -> {outputs.result.final_eval:.6f}")


@app.command("infer")
@handled
def infer(
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    sample: Optional[Path] = typer.Option(None, "--sample"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out"),
    no_iks: bool = typer.Option(False, "--no-iks"),
    no_distill: bool = typer.Option(False, "--no-distill"),
    no_qkey: bool = typer.Option(False, "--no-qkey"),
    no_keybg: bool = typer.Option(False, "--no-keybg"),
    no_fusion: bool = typer.Option(False, "--no-fusion"),
    no_cbdo: bool = typer.Option(False, "--no-cbdo"),
    no_gdde: bool = typer.Option(False, "--no-gdde"),
    keyframes_1: bool = typer.Option(False, "--keyframes-1"),
    no_sr: bool = typer.Option(False, "--no-sr"),
):
    """Sample a try-on video for one sample and write its frames."""
    toggles = dict(no_iks=no_iks, no_distill=no_distill, no_qkey=no_qkey, no_keybg=no_keybg, no_fusion=no_fusion,
                   no_cbdo=no_cbdo, no_gdde=no_gdde, keyframes_1=keyframes_1, no_sr=no_sr)
    run = _resolve("infer", {
        "sample": sample, "checkpoint": checkpoint, "out": out, "seed": seed,
        "train": {"inference_steps": steps}, "ablation": _ablation_overrides(toggles),
    })
    frames = pipeline.run_inference(run, _out_dir(run, "runs/infer"))
    console.print(f"frames: {frames}")


@app.command("eval")
@handled
def evaluate(
    generated: Optional[Path] = typer.Option(None, "--generated"),
    reference: Optional[Path] = typer.Option(None, "--reference"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Per-frame SSIM and PSNR of a generated video against a reference."""
    run = _resolve("eval", {"generated": generated, "reference": reference, "out": out})
    if run.generated is None or run.reference is None:
        raise ConfigurationError("eval needs --generated and --reference")
    pipeline.run_eval(run.generated, run.reference, _out_dir(run, "runs/eval"), threads=_threads())


@app.command("gradcheck")
@handled
def grad_check(
    scope: Optional[str] = typer.Option(None, "--scope", help="layer, block or model."),
    seeds: Optional[int] = typer.Option(None, "--seeds"),
    step: Optional[float] = typer.Option(None, "--step", help="Central-difference step."),
    out: Optional[Path] = typer.Option(None, "--out"),
    corrupt_gradient: float = typer.Option(0.0, "--corrupt-gradient", hidden=True),
):
    """Compare analytic gradients with central differences."""
    run = _resolve("gradcheck", {"out": out, "gradcheck": {"scope": scope, "seeds": seeds, "step": step}})
    out_dir = _out_dir(run, "runs/gradcheck")
    results = gradcheck.run_gradcheck(run.gradcheck.scope, run.gradcheck.seeds, corrupt=corrupt_gradient,
                                      h=run.gradcheck.step)
    gradcheck.write_gradcheck_report(out_dir / gradcheck.REPORT_NAME, results)
    failed = [r for r in results if not r.passed]
    worst = max((r.error for r in results), default=0.0)
    console.print(f"{len(results) - len(failed)}/{len(results)} checks passed, worst error {worst:.3e}")
    if failed:
        names = sorted({f"{r.name}" for r in failed})
        raise NumericError(f"gradient check failed for {names}")


@app.command("show-config")
@handled
def show_config(out: Optional[Path] = typer.Option(None, "--out")):
    """Print the published defaults and the resolved configuration."""
    show_defaults()
    run = _resolve("show-config", {"out": out})
    _out_dir(run, "runs/show_config")
    console.print(run.model_dump(mode="json", by_alias=True))


@app.command("ablation-echo")
@handled
def ablation_echo(
    sample: Optional[Path] = typer.Option(None, "--sample"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Train the full pipeline and each ablation identically and compare SSIM."""
    run = _resolve("ablation-echo", {"sample": sample, "out": out, "train": {"steps": steps}})
    rows = pipeline.run_ablation_echo(run, _out_dir(run, "runs/ablation_echo"))
    table = Table(title="Ablation echo")
    table.add_column("variant")
    table.add_column("SSIM", justify="right")
    for name, score in rows:
        table.add_row(name, f"{score:.4f}")
    console.print(table)


if __name__ == "__main__":
    app()
