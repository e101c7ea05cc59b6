"""
Run Configuration
Serializable pydantic models for every run-level setting
"""

import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, OutputWriteError
from .masking import BODY_PARTS, RANDOM, MaskSpec

logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    """Rejects unknown keys"""

    model_config = ConfigDict(extra="forbid")


class ModelConfig(StrictModel):
    joint_count: int = 17
    frames: int = 64
    embed_dim: int = 64
    hidden_dim: int = 64
    encoder_depth: int = 3
    strl_layers: int = 3
    persons: int = 2
    backbone: Literal["gin", "gcn", "gat"] = "gin"
    gat_heads: int = 4
    strl_layer_norm: bool = False

    @model_validator(mode="after")
    def check_dims(self) -> "ModelConfig":
        if self.joint_count != 17:
            raise ValueError("joint_count is fixed at 17 (COCO-17 layout)")
        if self.persons != 2:
            raise ValueError("persons is fixed at 2")
        if self.frames < 4 or self.frames % 4 != 0:
            raise ValueError("frames must be a positive multiple of 4 for multi-scale temporal pooling")
        for name in ("embed_dim", "hidden_dim", "encoder_depth", "strl_layers", "gat_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.backbone == "gat" and self.hidden_dim % self.gat_heads != 0:
            raise ValueError("gat_heads must divide hidden_dim")
        return self


class MaskConfig(StrictModel):
    strategy: Literal["body_parts", "random"] = BODY_PARTS
    regions: List[int] = Field(default_factory=list)
    ratio: Optional[float] = None
    sample_regions: int = 1

    @model_validator(mode="after")
    def check_strategy(self) -> "MaskConfig":
        if self.strategy == RANDOM and (self.ratio is None or not 0.0 < self.ratio < 1.0):
            raise ValueError("random masking needs a ratio in (0, 1)")
        if self.strategy == BODY_PARTS:
            if any(not 0 <= r <= 5 for r in self.regions):
                raise ValueError("region ids must be in 0..5")
            if len(set(self.regions)) >= 6:
                raise ValueError("masking every region is not allowed")
            if not 1 <= self.sample_regions <= 5:
                raise ValueError("sample_regions must be in 1..5")
        return self

    def to_spec(self, seed: int = 0) -> MaskSpec:
        return MaskSpec(
            strategy=self.strategy,
            regions=tuple(sorted(set(self.regions))),
            ratio=self.ratio,
            sample_regions=self.sample_regions,
            rng_seed=seed,
        )

    @property
    def label(self) -> str:
        return self.to_spec().label


class PretrainConfig(StrictModel):
    lr: float = 1.5e-4
    epochs: int = 50
    batch_size: int = 1024
    beta: float = 2.0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    noise_sigma: float = 0.0
    checkpoint_every: int = 0

    @field_validator("lr")
    @classmethod
    def check_lr(cls, value: float) -> float:
        # 0 is accepted so a run can be frozen for verification
        if value < 0:
            raise ValueError("lr must be >= 0")
        return value

    @field_validator("beta")
    @classmethod
    def check_beta(cls, value: float) -> float:
        if value < 1:
            raise ValueError("beta must be >= 1")
        return value

    @model_validator(mode="after")
    def check_counts(self) -> "PretrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 0 or self.noise_sigma < 0:
            raise ValueError("epochs, checkpoint_every and noise_sigma must be >= 0, batch_size >= 1")
        return self


class FinetuneConfig(StrictModel):
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 110
    warmup_epochs: int = 5
    warmup_start_factor: float = 0.01
    decay_epochs: List[int] = Field(default_factory=lambda: [90, 100])
    decay_factor: float = 0.1
    label_smoothing: float = 0.1
    batch_size: int = 128
    weight_decay: float = 0.0
    noise_sigma: float = 0.01
    load_embedding: bool = True

    @model_validator(mode="after")
    def check_schedule(self) -> "FinetuneConfig":
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs and warmup_epochs must be >= 0, batch_size >= 1")
        if any(not 0 <= e < self.epochs for e in self.decay_epochs) and self.epochs > 0:
            raise ValueError("decay epochs must lie inside 0..epochs-1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        return self


class DataConfig(StrictModel):
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    class_count: Optional[int] = None


class SynthConfig(StrictModel):
    class_count: int = 4
    sequences_per_class: int = 50
    frame_count: int = 48
    noise_sigma: float = 1.0
    active_regions: Optional[List[int]] = None
    amplitude: float = 0.8
    distinct_regions: bool = True


class ExperimentConfig(StrictModel):
    strategies: List[MaskConfig] = Field(default_factory=list)
    backbones: List[Literal["gin", "gcn", "gat"]] = Field(default_factory=list)
    encoder_depths: List[int] = Field(default_factory=list)
    strl_layers: List[int] = Field(default_factory=list)
    compare_init: bool = False
    synthetic: Optional[SynthConfig] = None


class RunConfig(StrictModel):
    seed: int = 0
    output_dir: Optional[str] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def parse_run_config(payload: Union[str, dict], source: str = "<config>") -> RunConfig:
    """Validate a JSON string or mapping into a RunConfig."""
    try:
        data = json.loads(payload) if isinstance(payload, str) else payload
        return RunConfig.model_validate(data)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON ({e})") from None
    except ValidationError as e:
        raise ConfigError(f"{source}: invalid configuration\n{e}") from None


def load_run_config(path) -> RunConfig:
    """Load a run config file; missing or invalid files raise ConfigError naming the path."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from None
    config = parse_run_config(text, source=str(path))
    logger.info(f"Loaded run config from {path}")
    return config


def save_run_config(config: RunConfig, path) -> None:
    try:
        Path(path).write_text(config.to_json() + "\n", encoding="utf-8")
    except OSError as e:
        raise OutputWriteError(path, e) from None
