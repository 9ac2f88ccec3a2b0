"""
Configuration classes for densityfed experiments
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .cascade import CHECKPOINT_BEST, CHECKPOINT_FINAL, TrainingHyperparams
from .exceptions import ConfigurationError, ErrorCode, create_file_not_found_error
from .federation import DEFAULT_MAX_FRAME_BYTES, DEFAULT_ROUND_TIMEOUT
from .models import InstitutionProfile, Regime, ViewStyle
from .phantom import default_profiles, validate_profile
from .preprocess import DEFAULT_TAG_THRESHOLD
from .tensor_nn import UNetConfig

LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
INSTITUTION_PREFIX = "institution"


@dataclass
class RuntimeConfig:
    """Process-level settings that do not change experiment results"""
    log_level: str = "INFO"
    eval_workers: int = 1
    max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES
    round_timeout_seconds: float = DEFAULT_ROUND_TIMEOUT
    templates_dir: Optional[str] = None

    @classmethod
    def from_env(cls) -> 'RuntimeConfig':
        """Create runtime configuration from environment variables"""
        try:
            return cls(
                log_level=os.getenv('DF_LOG_LEVEL', cls.log_level).upper(),
                eval_workers=int(os.getenv('DF_EVAL_WORKERS', str(cls.eval_workers))),
                max_frame_bytes=int(os.getenv('DF_MAX_FRAME_BYTES', str(cls.max_frame_bytes))),
                round_timeout_seconds=float(os.getenv('DF_ROUND_TIMEOUT', str(cls.round_timeout_seconds))),
                templates_dir=os.getenv('DF_TEMPLATES_DIR'),
            )
        except ValueError as e:
            raise ConfigurationError(f"Invalid numeric environment setting: {e}",
                                     suggestions=["Check the DF_* environment variables"])

    def validate(self) -> bool:
        """Validate configuration values"""
        if self.eval_workers <= 0:
            raise ConfigurationError("eval_workers must be positive", config_key="DF_EVAL_WORKERS")
        if self.max_frame_bytes <= 0:
            raise ConfigurationError("max_frame_bytes must be positive", config_key="DF_MAX_FRAME_BYTES")
        if self.round_timeout_seconds <= 0:
            raise ConfigurationError("round_timeout_seconds must be positive", config_key="DF_ROUND_TIMEOUT")
        if self.log_level not in LOG_LEVELS:
            raise ConfigurationError(f"Invalid log_level '{self.log_level}'", config_key="DF_LOG_LEVEL",
                                     suggestions=[f"Use one of {', '.join(LOG_LEVELS)}"])
        return True

    def get_templates_dir(self) -> Optional[Path]:
        return Path(self.templates_dir) if self.templates_dir else None


# ---------------------------------------------------------------------------
# Experiment description
# ---------------------------------------------------------------------------

class UNetSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_size: int = 64
    levels: int = 3
    base_channels: int = 8

    def to_unet_config(self) -> UNetConfig:
        return UNetConfig(input_size=self.input_size, levels=self.levels, base_channels=self.base_channels)


class TrainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-4, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(30, ge=0)
    local_epochs: int = Field(1, ge=1)
    threshold: float = Field(0.5, gt=0, lt=1)
    augment: bool = True
    tag_threshold: float = Field(DEFAULT_TAG_THRESHOLD, gt=0, lt=1)


class FederationSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    host: str = "127.0.0.1"
    port: int = Field(0, ge=0, le=65535)
    connect_attempts: int = Field(3, ge=1)
    backoff_seconds: float = Field(0.5, ge=0)


class InstitutionSettings(BaseModel):
    """Phantom appearance of one institution"""
    model_config = ConfigDict(extra="forbid")

    view_style: ViewStyle = ViewStyle.CC
    intensity_gain: float = 1.0
    noise_sigma: float = 0.01
    breast_size_range: Tuple[float, float] = (0.45, 0.7)
    dense_blob_range: Tuple[int, int] = (1, 5)
    tag_probability: float = 0.5
    n_subjects: int = 125
    images_per_subject: int = 2

    @classmethod
    def from_profile(cls, profile: InstitutionProfile) -> 'InstitutionSettings':
        return cls(
            view_style=profile.view_style,
            intensity_gain=profile.intensity_gain,
            noise_sigma=profile.noise_sigma,
            breast_size_range=profile.breast_size_range,
            dense_blob_range=profile.dense_blob_range,
            tag_probability=profile.tag_probability,
            n_subjects=profile.n_subjects,
            images_per_subject=profile.images_per_subject,
        )

    def to_profile(self, name: str, image_size: int) -> InstitutionProfile:
        profile = InstitutionProfile(
            name=name,
            view_style=self.view_style,
            intensity_gain=self.intensity_gain,
            noise_sigma=self.noise_sigma,
            breast_size_range=tuple(self.breast_size_range),  # type: ignore[arg-type]
            dense_blob_range=tuple(self.dense_blob_range),  # type: ignore[arg-type]
            tag_probability=self.tag_probability,
            n_subjects=self.n_subjects,
            images_per_subject=self.images_per_subject,
            image_size=image_size,
        )
        validate_profile(profile)
        return profile


def _default_institutions() -> Dict[str, InstitutionSettings]:
    return {name: InstitutionSettings.from_profile(p) for name, p in default_profiles().items()}


class ExperimentConfig(BaseModel):
    """
    Everything that determines an experiment's results

    Serialised as flat key=value text with dotted keys for nesting, e.g.
    ``unet.levels=3`` or ``institution.A.view_style=cc``.
    """
    model_config = ConfigDict(extra="forbid")

    seed: int = 7
    regime: Regime = Regime.CENTRALIZED_POOLED
    output_dir: str = "densityfed-out"
    image_size: int = Field(64, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    validation_fraction: float = Field(0.2, ge=0, lt=1)
    label_noise: float = Field(0.0, ge=0)
    # "best" keeps the lowest-validation-loss epoch of a centralized run; federated
    # runs always keep the final aggregate, so they match centralized only under "final"
    checkpoint: str = CHECKPOINT_BEST
    unet: UNetSettings = Field(default_factory=UNetSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    federation: FederationSettings = Field(default_factory=FederationSettings)
    institutions: Dict[str, InstitutionSettings] = Field(default_factory=_default_institutions)

    @model_validator(mode="after")
    def _check_consistency(self) -> 'ExperimentConfig':
        if not self.institutions:
            raise ValueError("at least one institution is required")
        for name in self.institutions:
            if not name or not all(c.isalnum() or c in "-_" for c in name):
                raise ValueError(f"institution name '{name}' may only contain letters, digits, '-' and '_'")
        if self.unet.input_size % (2 ** self.unet.levels) != 0:
            raise ValueError(f"unet.input_size {self.unet.input_size} must be divisible by 2^unet.levels")
        if self.checkpoint not in (CHECKPOINT_BEST, CHECKPOINT_FINAL):
            raise ValueError(f"checkpoint must be '{CHECKPOINT_BEST}' or '{CHECKPOINT_FINAL}'")
        return self

    @property
    def rounds(self) -> int:
        """Federated rounds; one round per training epoch"""
        return self.train.epochs

    def unet_config(self) -> UNetConfig:
        return self.unet.to_unet_config()

    def hyperparams(self) -> TrainingHyperparams:
        return TrainingHyperparams(
            learning_rate=self.train.learning_rate,
            weight_decay=self.train.weight_decay,
            batch_size=self.train.batch_size,
            epochs=self.train.epochs,
            validation_fraction=self.validation_fraction,
            checkpoint=self.checkpoint,
            local_epochs=self.train.local_epochs,
            augment=self.train.augment,
            tag_threshold=self.train.tag_threshold,
        )

    def profiles(self) -> Dict[str, InstitutionProfile]:
        """Validated phantom profiles, in institution-name order"""
        return {name: self.institutions[name].to_profile(name, self.image_size)
                for name in sorted(self.institutions)}

    def with_overrides(self, **overrides: Any) -> 'ExperimentConfig':
        """Copy with CLI overrides applied; None values are ignored"""
        updates = {key: str(value) if isinstance(value, Path) else value
                   for key, value in overrides.items() if value is not None}
        if not updates:
            return self
        data = self.model_dump()
        data.update(updates)
        return _validate(data, "command-line overrides")


def _validate(data: Dict[str, Any], source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = [f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}" for error in e.errors()]
        first_key = ".".join(str(part) for part in e.errors()[0]["loc"]) if e.errors() else None
        raise ConfigurationError(
            f"Invalid configuration in {source}: " + "; ".join(problems),
            config_key=first_key or None,
            suggestions=["Run 'densityfed show-config' for the full list of keys and defaults"],
        )


# ---------------------------------------------------------------------------
# Flat key=value format
# ---------------------------------------------------------------------------

def _flatten(data: Dict[str, Any], prefix: str = "") -> List[Tuple[str, str]]:
    entries: List[Tuple[str, str]] = []
    for key, value in data.items():
        if key == "institutions" and not prefix:
            for name in sorted(value):
                entries.extend(_flatten(value[name], f"{INSTITUTION_PREFIX}.{name}."))
        elif isinstance(value, dict):
            entries.extend(_flatten(value, f"{prefix}{key}."))
        elif isinstance(value, (list, tuple)):
            entries.append((f"{prefix}{key}", ",".join(str(v) for v in value)))
        elif isinstance(value, bool):
            entries.append((f"{prefix}{key}", "true" if value else "false"))
        else:
            entries.append((f"{prefix}{key}", str(value)))
    return entries


def dump_experiment_config(config: ExperimentConfig) -> str:
    """Serialise every field as key=value lines"""
    lines = ["# densityfed experiment configuration"]
    lines.extend(f"{key}={value}" for key, value in _flatten(config.model_dump(mode="json")))
    return "\n".join(lines) + "\n"


def parse_experiment_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """
    Parse flat key=value text over the defaults

    Keys missing from the text keep their default values. Naming any
    institution replaces the default institution set with the named ones,
    each starting from the default of the same name when there is one.
    Unknown keys and repeated keys are errors.

    Raises:
        ConfigurationError: Malformed line, unknown key or invalid value
    """
    data = ExperimentConfig().model_dump(mode="json")
    default_institutions = data["institutions"]
    institutions: Dict[str, Dict[str, Any]] = {}
    seen = set()
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{line_number}: expected key=value, got '{raw}'",
                                     ErrorCode.INVALID_CONFIG)
        if key in seen:
            raise ConfigurationError(f"{source}:{line_number}: duplicate key '{key}'", config_key=key)
        seen.add(key)

        parts = key.split(".")
        if parts[0] == INSTITUTION_PREFIX:
            if len(parts) != 3:
                raise ConfigurationError(f"{source}:{line_number}: expected institution.<name>.<field>",
                                         config_key=key)
            node = institutions.setdefault(parts[1], dict(default_institutions.get(parts[1], {})))
            field_name = parts[2]
        else:
            node = data
            for part in parts[:-1]:
                child = node.get(part)
                if not isinstance(child, dict):
                    raise ConfigurationError(f"{source}:{line_number}: unknown key '{key}'", config_key=key)
                node = child
            field_name = parts[-1]
        node[field_name] = value.split(",") if "," in value else value
    if institutions:
        data["institutions"] = institutions
    return _validate(data, source)


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Load an experiment configuration file

    Raises:
        FileError: Missing file
        ConfigurationError: Invalid content
    """
    source = Path(path)
    if not source.exists():
        raise create_file_not_found_error(str(source))
    return parse_experiment_config(source.read_text(encoding="utf-8"), str(source))
