"""
Configuration models.

Every tunable value lives in one of the pydantic models below. A run is
resolved from three layers, later layers winning: model defaults, an optional
YAML file (``--config``) and command-line flags. The resolved RunConfig is
written next to every command's outputs as ``resolved_config.yaml``.
"""
import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigurationError, StorageError

logger = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = "Show front and back of clothes, raise hand to display sleeves"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"


class ScoringMode(str, Enum):
    EQ1 = "eq1"
    ALGORITHM = "algorithm"


class Settings(BaseSettings):
    """Process-level settings read from ``KEYTAILOR_*`` variables or ``.env``."""

    model_config = SettingsConfigDict(env_prefix="KEYTAILOR_", env_file=".env", extra="ignore")

    threads: int = Field(1, ge=1)
    log_level: str = "INFO"


def get_settings() -> Settings:
    try:
        return Settings()
    except ValidationError as e:
        raise ConfigurationError(f"invalid environment settings: {e}") from e


class SamplerConfig(BaseModel):
    """Keyframe sampling and frame scoring."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    k_max: int = Field(3, ge=1)
    w1: float = Field(0.3, ge=0)
    w2: float = Field(0.2, ge=0)
    w3: float = Field(0.3, ge=0)
    w4: float = Field(0.2, ge=0)
    lambda_: float = Field(0.5, ge=0, alias="lambda")
    # None means (last timestamp - first timestamp) / 5
    t_thres: Optional[float] = Field(None, ge=0)
    occlu_thres: float = Field(0.2, ge=0, le=1)
    score_diff_min: float = Field(0.1, ge=0)
    scoring_mode: ScoringMode = ScoringMode.ALGORITHM
    clarity_threshold: float = Field(50.0, ge=0)
    parser: str = "keyword"
    scorer: str = "labels"


class ModelConfig(BaseModel):
    """Architecture of the conditioning stack and the transformer."""

    model_config = ConfigDict(extra="forbid")

    blocks: int = Field(2, ge=1)
    width: int = Field(64, ge=2)
    heads: int = Field(4, ge=1)
    rank: int = Field(4, ge=1)
    latent_channels: int = Field(16, ge=1)
    patch: Tuple[int, int, int] = (1, 1, 1)
    ffn_mult: int = Field(4, ge=1)
    time_frequencies: int = Field(8, ge=1)
    velocity_floor: float = Field(0.05, gt=0, le=1)
    alpha: float = Field(0.3, ge=0, le=1)
    guider_channels: Tuple[int, int, int, int] = (32, 96, 192, 256)
    lora_std: float = Field(0.02, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.width % self.heads:
            raise ValueError(f"heads={self.heads} must divide width={self.width}")
        if any(p < 1 for p in self.patch):
            raise ValueError(f"patch extents must be positive, got {self.patch}")
        token_width = (2 * self.latent_channels + 1) * self.patch[0] * self.patch[1] * self.patch[2]
        if self.width < token_width + 1:
            raise ValueError(f"width={self.width} must exceed the guidance token width {token_width}")
        if self.rank >= self.width:
            raise ValueError(f"rank={self.rank} must stay below width={self.width}")
        return self


class TrainConfig(BaseModel):
    """Optimizer and schedule."""

    model_config = ConfigDict(extra="forbid")

    # 0 leaves every parameter untouched
    lr: float = Field(1e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    batch_size: int = Field(1, ge=1, le=1)
    steps: int = Field(200, ge=0)
    inference_steps: int = Field(25, ge=1)
    seed: int = 0
    log_every: int = Field(10, ge=1)


class AblationConfig(BaseModel):
    """Ablation toggles; each one reroutes a single data path."""

    model_config = ConfigDict(extra="forbid")

    no_iks: bool = False
    no_distill: bool = False
    no_qkey: bool = False
    no_keybg: bool = False
    no_fusion: bool = False
    no_cbdo: bool = False
    no_gdde: bool = False
    keyframes_1: bool = False
    no_sr: bool = False

    @model_validator(mode="after")
    def _check_exclusive(self):
        groups = [
            ("no_cbdo", "no_keybg", "no_fusion"),
            ("no_gdde", "no_distill"),
            ("no_gdde", "no_qkey"),
            ("no_iks", "keyframes_1"),
            ("no_iks", "no_sr"),
            ("keyframes_1", "no_sr"),
        ]
        for group in groups:
            on = [name for name in group if getattr(self, name)]
            if len(on) > 1:
                flags = ", ".join("--" + n.replace("_", "-") for n in on)
                raise ValueError(f"mutually exclusive ablations: {flags}")
        return self

    def active(self) -> List[str]:
        return [name for name, value in self.model_dump().items() if value]


class CorpusConfig(BaseModel):
    """Synthetic corpus generation; the size lower bound is enforced by the generator."""

    model_config = ConfigDict(extra="forbid")

    seeds: List[int] = Field(default_factory=lambda: list(range(1, 51)))
    frames: int = Field(16, ge=2)
    size: int = 64
    fps: float = Field(8.0, gt=0)


class CheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scope: Literal["layer", "block", "model"] = "layer"
    # None means the scope's default seed count
    seeds: Optional[int] = Field(None, ge=1)
    step: float = Field(1e-4, gt=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str = ""
    sample: Optional[Path] = None
    out: Optional[Path] = None
    checkpoint: Optional[Path] = None
    generated: Optional[Path] = None
    reference: Optional[Path] = None
    instruction: str = DEFAULT_INSTRUCTION
    seed: int = 0
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    gradcheck: CheckConfig = Field(default_factory=CheckConfig)


# Published constants echoed by show-config: (key, value, origin)
DEFAULTS_TABLE: List[Tuple[str, Any, str]] = [
    ("sampler.lambda", 0.5, "λ, balance of the garment-ratio term S_r in the frame score, best value of the λ sweep"),
    ("model.alpha", 0.3, "background fusion weight α, stated default"),
    ("sampler.k_max", 3, "keyframe count K, best value of the keyframe-count sweep"),
    ("sampler.clarity_threshold", 50.0, "Sobel edge threshold, stated default"),
    ("sampler.occlu_thres", 0.2, "garment occlusion threshold, sampling procedure parameters"),
    ("sampler.weights", (0.3, 0.2, 0.3, 0.2), "w1..w4, sampling procedure parameters"),
    ("sampler.score_diff_min", 0.1, "minimum score difference, sampling procedure parameters"),
    ("train.inference_steps", 25, "denoising steps, implementation details"),
    ("train.lr", 1e-4, "fixed learning rate, implementation details"),
    ("train.batch_size", 1, "batch size, implementation details"),
]


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict):
            base_value = merged.get(key)
            merged[key] = _deep_merge(base_value if isinstance(base_value, dict) else {}, value)
        elif value is not None:
            merged[key] = value
    return merged


def load_yaml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must hold a mapping at top level")
    return data


def resolve_run_config(command: str, config_path: Optional[Path] = None,
                       overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge defaults, the YAML file and flag overrides (None values are skipped)."""
    layered: Dict[str, Any] = {}
    if config_path is not None:
        layered = _deep_merge(layered, load_yaml(config_path))
        logger.info(f"Loaded configuration file {config_path}")
    layered = _deep_merge(layered, overrides or {})
    layered["command"] = command
    try:
        return RunConfig.model_validate(layered)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration for {command}: {e}") from e


def build_model_config(**values) -> ModelConfig:
    try:
        return ModelConfig(**values)
    except ValidationError as e:
        raise ConfigurationError(f"invalid model configuration: {e}") from e


def config_fingerprint(model: ModelConfig) -> str:
    canonical = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_resolved_config(run: RunConfig, out_dir: Path) -> Path:
    path = Path(out_dir) / RESOLVED_CONFIG_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(run.model_dump(mode="json", by_alias=True), f, sort_keys=False)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    logger.info(f"Resolved configuration written to {path}")
    return path
