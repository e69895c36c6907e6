"""
Configuration management for the AHP-Net low-dose CT toolkit.

This module provides the run configuration schema and a manager that
resolves it from defaults, environment variables, a JSON file and
command-line overrides, in that order.
"""

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError as SchemaError, field_validator, model_validator

from .constants import (
    ADAM_DEFAULTS,
    BANK_KINDS,
    BATCH_SIZE,
    BETA_INIT,
    CG_TRAIN,
    DEFAULT_SEED,
    DESK_CNN_CHANNELS,
    DESK_CNN_DEPTH,
    DESK_GEOMETRY,
    ELECTRONIC_VARIANCE,
    HP_MODES,
    INTERMEDIATE_LOSS_WEIGHT,
    LOG_LEVEL,
    MLP_HIDDEN,
    OUTPUT_DIR,
    STAGES,
    VARIANTS,
)
from .error_handling import ConfigurationError

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    """Base for config sections: unknown keys are errors."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GeometryConfig(_Section):
    """Fan-beam scan geometry."""
    n_views: int = Field(DESK_GEOMETRY["n_views"], ge=1)
    n_bins: int = Field(DESK_GEOMETRY["n_bins"], ge=1)
    image_size: Tuple[int, int] = DESK_GEOMETRY["image_size"]
    pixel_size: float = Field(DESK_GEOMETRY["pixel_size"], gt=0)
    detector_pixel: float = Field(DESK_GEOMETRY["detector_pixel"], gt=0)
    source_to_detector: float = Field(DESK_GEOMETRY["source_to_detector"], gt=0)
    source_to_isocenter: float = Field(DESK_GEOMETRY["source_to_isocenter"], gt=0)
    angular_span: float = Field(DESK_GEOMETRY["angular_span"], gt=0, le=2.0 * math.pi + 1e-12)

    @model_validator(mode="after")
    def _check_distances(self):
        if self.source_to_detector <= self.source_to_isocenter:
            raise ValueError("source_to_detector must exceed source_to_isocenter")
        if min(self.image_size) < 1:
            raise ValueError("image_size entries must be positive")
        return self


class NoiseConfig(_Section):
    """Measurement simulation settings."""
    dose: float = Field(1e4, gt=0)
    dose_set: Optional[str] = None
    electronic_variance: float = Field(ELECTRONIC_VARIANCE, ge=0)
    seed: int = DEFAULT_SEED
    phantom: str = "random"
    count: int = Field(200, ge=1)

    @field_validator("dose_set")
    @classmethod
    def _check_dose_set(cls, value):
        if value is not None and value not in ("standard", "universal"):
            raise ValueError("dose_set must be 'standard' or 'universal'")
        return value


class ModelSection(_Section):
    """Network architecture settings."""
    stages: int = Field(STAGES, ge=0)
    bank_kind: str = "bspline-linear"
    hp_mode: str = "mlp"
    variant: Optional[str] = None
    cnn_depth: int = Field(DESK_CNN_DEPTH, ge=2)
    cnn_channels: int = Field(DESK_CNN_CHANNELS, ge=1)
    mlp_hidden: Tuple[int, int] = MLP_HIDDEN
    beta0: float = Field(BETA_INIT, gt=0)
    mu: float = Field(INTERMEDIATE_LOSS_WEIGHT, ge=0)
    full_gradient: bool = True
    cg_max_iters: int = Field(int(CG_TRAIN["max_iters"]), ge=1)
    cg_rel_tolerance: float = Field(CG_TRAIN["rel_tolerance"], gt=0, lt=1)

    @field_validator("bank_kind")
    @classmethod
    def _check_bank(cls, value):
        if value not in BANK_KINDS:
            raise ValueError(f"unknown bank_kind '{value}'")
        return value

    @field_validator("hp_mode")
    @classmethod
    def _check_hp_mode(cls, value):
        if value not in HP_MODES:
            raise ValueError(f"unknown hp_mode '{value}'")
        return value

    @field_validator("variant")
    @classmethod
    def _check_variant(cls, value):
        if value is not None and value not in VARIANTS:
            raise ValueError(f"unknown variant '{value}'")
        return value


class TrainSection(_Section):
    """Optimizer and loop settings."""
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(BATCH_SIZE, ge=1)
    lr: float = Field(ADAM_DEFAULTS["lr"], ge=0)
    beta1: float = Field(ADAM_DEFAULTS["beta1"], ge=0, lt=1)
    beta2: float = Field(ADAM_DEFAULTS["beta2"], ge=0, lt=1)
    eps: float = Field(ADAM_DEFAULTS["eps"], gt=0)
    precision: str = "float32"
    seed: int = DEFAULT_SEED
    checkpoint_every: int = Field(5, ge=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)

    @field_validator("precision")
    @classmethod
    def _check_precision(cls, value):
        if value not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        return value


class PathsConfig(_Section):
    """Input and output locations."""
    dataset_dir: str = "data"
    checkpoint_dir: str = os.path.join(OUTPUT_DIR, "checkpoints")
    output_dir: str = OUTPUT_DIR


class LoggingConfig(_Section):
    """Logging configuration."""
    level: str = LOG_LEVEL
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file_path: Optional[str] = None
    max_file_size: int = 10 * 1024 * 1024  # 10MB
    backup_count: int = 5
    structured_logging: bool = False
    log_to_console: bool = True


class RunConfig(_Section):
    """Fully resolved configuration of one toolkit run."""
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)


def parse_override(text: str) -> Tuple[List[str], Any]:
    """Split a `key.path=value` override; values are JSON when they parse."""
    if "=" not in text:
        raise ConfigurationError(f"Override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"Override '{text}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _merge(target: Dict[str, Any], updates: Dict[str, Any]):
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            _merge(target[key], value)
        else:
            target[key] = value


class ConfigurationManager:
    """Manages run configuration from multiple sources."""

    def __init__(
        self,
        config_file: Optional[str] = None,
        environment: str = "development",
        overrides: Optional[List[str]] = None
    ):
        self.environment = environment
        self.config_file = config_file
        self.overrides = list(overrides or [])

        data = RunConfig().model_dump()
        self._apply_environment_overrides(data)
        self._load_from_environment(data)
        if config_file:
            _merge(data, self._load_from_file(config_file))
        for override in self.overrides:
            self._apply_override(data, override)

        try:
            self.config = RunConfig.model_validate(data)
        except SchemaError as e:
            raise ConfigurationError(
                f"Invalid configuration: {e.errors()[0]['loc']} {e.errors()[0]['msg']}",
                context={"errors": [str(err["loc"]) for err in e.errors()]},
                original_error=e,
            ) from e

    def _load_from_environment(self, data: Dict[str, Any]):
        """Load configuration from environment variables."""
        if os.getenv("LOG_LEVEL"):
            data["logging"]["level"] = os.getenv("LOG_LEVEL")
        if os.getenv("LOG_FILE"):
            data["logging"]["file_path"] = os.getenv("LOG_FILE")
        if os.getenv("STRUCTURED_LOGGING"):
            data["logging"]["structured_logging"] = os.getenv("STRUCTURED_LOGGING").lower() == "true"
        if os.getenv("AHP_OUTPUT_DIR"):
            data["paths"]["output_dir"] = os.getenv("AHP_OUTPUT_DIR")
        if os.getenv("AHP_SEED"):
            data["noise"]["seed"] = int(os.getenv("AHP_SEED"))
            data["train"]["seed"] = int(os.getenv("AHP_SEED"))

    def _load_from_file(self, config_file: str) -> Dict[str, Any]:
        """Load configuration from a JSON file."""
        config_path = Path(config_file)
        if not config_path.exists():
            raise ConfigurationError(f"Config file {config_file} does not exist")
        try:
            with open(config_path, "r") as f:
                config_data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {config_file} is not valid JSON: {e}", original_error=e) from e
        if not isinstance(config_data, dict):
            raise ConfigurationError(f"Config file {config_file} must hold a JSON object")
        # Config echoes carry the environment they were resolved in
        config_data.pop("environment", None)
        return config_data

    def _apply_override(self, data: Dict[str, Any], override: str):
        """Apply one `--set key.path=value` override."""
        path, value = parse_override(override)
        node = data
        for part in path[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"Unknown config key '{'.'.join(path)}'")
            node = node[part]
        if not isinstance(node, dict) or path[-1] not in node:
            raise ConfigurationError(f"Unknown config key '{'.'.join(path)}'")
        node[path[-1]] = value

    def _apply_environment_overrides(self, data: Dict[str, Any]):
        """Apply environment-specific defaults."""
        if self.environment == "testing":
            data["logging"]["level"] = "DEBUG"
            data["geometry"].update({"n_views": 30, "n_bins": 48, "image_size": (16, 16)})
            data["model"].update({"cnn_depth": 3, "cnn_channels": 4, "stages": 2})
            data["train"].update({"epochs": 1, "precision": "float64"})
        elif self.environment == "development":
            data["logging"]["level"] = "DEBUG"
        elif self.environment == "production":
            data["logging"]["level"] = "INFO"

    def get_config(self) -> RunConfig:
        """Get the resolved run configuration."""
        return self.config

    def get_all_config(self) -> Dict[str, Any]:
        """Get all configuration as a JSON-ready dictionary."""
        return {"environment": self.environment, **self.config.model_dump(mode="json")}

    def validate_paths(self, inputs: Sequence[str] = (), outputs: Sequence[str] = ()) -> Dict[str, Any]:
        """Check the run's paths before any work starts.

        Args:
            inputs: `paths` fields that must already exist
            outputs: `paths` fields that must be directories, or creatable
                under a writable existing directory

        Returns:
            Dictionary with validation results

        Raises:
            ConfigurationError: naming the first offending path
        """
        for name in inputs:
            path = Path(getattr(self.config.paths, name))
            if not path.exists():
                raise ConfigurationError(
                    f"Path paths.{name}={path} does not exist",
                    context={"path": str(path)},
                )
        for name in outputs:
            path = Path(getattr(self.config.paths, name))
            anchor = path
            while not anchor.exists():
                anchor = anchor.parent
            if not anchor.is_dir() or not os.access(anchor, os.W_OK):
                raise ConfigurationError(
                    f"Output path paths.{name}={path} is not writable",
                    context={"path": str(path), "blocked_by": str(anchor)},
                )
        return {"valid": True, "inputs": list(inputs), "outputs": list(outputs)}

    def save_config(self, file_path: str):
        """Save the fully resolved configuration to file."""
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w") as f:
            json.dump(self.get_all_config(), f, indent=2, sort_keys=True)
        logger.info(f"Resolved configuration written to {file_path}")


def load_run_config(
    config_file: Optional[str] = None,
    overrides: Optional[List[str]] = None,
    environment: Optional[str] = None
) -> ConfigurationManager:
    """Create a configuration manager for one run."""
    if environment is None:
        environment = os.getenv("ENVIRONMENT", "production")
    if config_file is None:
        config_file = os.getenv("CONFIG_FILE")
    return ConfigurationManager(config_file, environment, overrides)


def read_config_echo(file_path: str) -> RunConfig:
    """Read a config echo written by `save_config` back into a RunConfig."""
    path = Path(file_path)
    if not path.exists():
        raise ConfigurationError(f"Config echo {file_path} does not exist")
    with open(path, "r") as f:
        data = json.load(f)
    data.pop("environment", None)
    try:
        return RunConfig.model_validate(data)
    except SchemaError as e:
        raise ConfigurationError(f"Config echo {file_path} is invalid: {e.errors()[0]['msg']}", original_error=e) from e

