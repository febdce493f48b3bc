"""Configuration utilities for stitchkit."""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from ..align import PyramidConfig
from ..exceptions import ConfigurationError
from ..losses import LossWeights
from ..reconstruct import BranchConfig, OptimizerConfig
from .io import safe_read_file

CONFIG_ENV_VAR = "STITCHKIT_CONFIG"
DEFAULT_CONFIG_NAME = "stitchkit.yml"


class SynthConfig(BaseModel):
    """Synthetic pair generation."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    count: int = Field(10, ge=1)
    disturbance: float = Field(32.0, ge=0.0)
    crop_size: int = Field(128, ge=32)
    disturbance_sweep: List[float] = Field(default_factory=lambda: [8.0, 16.0, 32.0])
    jitter: bool = False


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    metric: Literal["rmse", "psnr", "ssim"] = "rmse"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(20, ge=1)
    max_iterations: Optional[int] = Field(None, ge=1)
    shuffle: bool = True


class DataConfig(BaseModel):
    """Dataset locations; relative paths are taken from the working directory."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    manifest: Optional[Path] = None
    results: Optional[Path] = None
    feature_checkpoint: Optional[Path] = None


class PipelineConfig(BaseModel):
    """Everything one stitchkit run reads; the root seed feeds every random draw."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    output_dir: Path = Path("out")
    loss: LossWeights = Field(default_factory=LossWeights)
    pyramid: PyramidConfig = Field(default_factory=PyramidConfig)
    branch: BranchConfig = Field(default_factory=BranchConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    data: DataConfig = Field(default_factory=DataConfig)


def get_config_path_from_env() -> Optional[Path]:
    """Get configuration file path from environment variable."""
    config_path = os.environ.get(CONFIG_ENV_VAR)
    if config_path:
        return Path(config_path)
    return None


def resolve_config_path(config_path: Optional[str] = None) -> Optional[Path]:
    """Resolve the configuration file path; None means built-in defaults."""
    if config_path:
        return Path(config_path)

    env_path = get_config_path_from_env()
    if env_path:
        return env_path

    local = Path.cwd() / DEFAULT_CONFIG_NAME
    if local.exists():
        return local
    return None


def _format_errors(e: PydanticValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
    )


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(dict(data))
    except PydanticValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {_format_errors(e)}")


def load_config(config_path: Optional[str] = None) -> PipelineConfig:
    """Load and validate the pipeline configuration (YAML or JSON)."""
    path = resolve_config_path(config_path)
    if path is None:
        return PipelineConfig()

    data = safe_read_file(path)
    if data is None:
        raise ConfigurationError(f"Configuration file not found: {path}")
    try:
        loaded = yaml.safe_load(data)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Invalid YAML format in {path}: {e}")
    if loaded is None:
        return PipelineConfig()
    if not isinstance(loaded, dict):
        raise ConfigurationError(f"Configuration in {path} must be a mapping")
    return config_from_dict(loaded)


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = target
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"Cannot override '{dotted}': '{key}' is not a section")
    node[keys[-1]] = value


def apply_overrides(config: PipelineConfig, overrides: Mapping[str, Any]) -> PipelineConfig:
    """Return a copy with dotted-key overrides applied; None values are skipped."""
    data = config.model_dump()
    for key, value in overrides.items():
        if value is not None:
            _set_dotted(data, key, value)
    return config_from_dict(data)


def dump_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), default_flow_style=False, sort_keys=False)
