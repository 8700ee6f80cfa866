"""
Configuration management for the pipeline.

Settings are loaded with pydantic-settings from a YAML (or JSON) document and
overridden by environment variables. Every section is validated before any
work starts; a failed validation raises ConfigValidationError.
"""
import logging
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from app.errors import ConfigValidationError
from app.nn.rng import Rng
from app.nn.train import TrainConfig
from app.phantom.augment import AugmentConfig
from app.phantom.generator import PhantomConfig
from app.services.characterization import GRAM_LAYERS
from app.services.segmentation import AidUNetSpec

logger = logging.getLogger(__name__)

# Define the root directory of the project
BASE_DIR = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG_PATH = BASE_DIR / "configs" / "pipeline.yaml"

_config_path: ContextVar[Optional[Path]] = ContextVar("config_path", default=None)


# --- Nested section models ---

class PathsSettings(BaseModel):
    dataset_dir: Path = Path("data/phantom")
    model_dir: Path = Path("models")
    report_dir: Path = Path("reports")


class PhantomSettings(PhantomConfig):
    """Rendering parameters plus dataset sizes."""
    n_polyp: int = Field(200, ge=0)
    n_normal: int = Field(200, ge=0)
    pretext_count: int = Field(200, ge=2, description="Images in the texture pretext task")
    augment: AugmentConfig = Field(default_factory=AugmentConfig)


class SplitSettings(BaseModel):
    test_fraction: float = Field(0.30, gt=0, lt=1)
    val_fraction: float = Field(0.15, ge=0, lt=1, description="Share of the non-test originals tagged val")


class RecognitionSettings(BaseModel):
    pretrain: TrainConfig = Field(default_factory=lambda: TrainConfig(initial_lr=0.02, max_epochs=3))
    finetune: TrainConfig = Field(default_factory=lambda: TrainConfig(initial_lr=0.02, max_epochs=6))
    fine_tune_last_k: int = Field(2, ge=0)
    augment_factor: int = Field(1, ge=1)
    tie_break_positive: bool = False


class SegmentationSettings(AidUNetSpec):
    threshold: float = Field(0.5, gt=0, lt=1)
    wrong_region_iou: float = Field(0.2, gt=0, le=1)
    min_region_px: int = Field(5, ge=1)
    compare_baseline: bool = Field(False, description="Also train a plain U-Net (sub_depth 0) during evaluate")
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(initial_lr=0.05, max_epochs=6))


class SizingSettings(BaseModel):
    kernel_scale: float = Field(0.25, gt=0)
    ridge: float = Field(1e-3, ge=0)
    outlier_mad_multiplier: float = Field(3.0, gt=0)
    outlier_floor_mm: float = Field(0.5, ge=0)


class CharacterizationSettings(BaseModel):
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(initial_lr=0.02, max_epochs=6))
    augment_factor: int = Field(4, ge=1)
    gram_layers: list[str] = Field(default_factory=lambda: list(GRAM_LAYERS))
    mask_restricted: bool = False


class StageSettings(BaseModel):
    enable_sizing: bool = True
    enable_characterization: bool = True
    write_saliency: bool = True
    write_overlays: bool = True


# --- Pydantic-Settings Integration ---

class YamlConfigSource(PydanticBaseSettingsSource):
    """
    A pydantic-settings source that loads settings from a YAML document.
    JSON documents load through the same parser.
    """

    def __init__(self, settings_cls: type[BaseSettings], path: Path):
        super().__init__(settings_cls)
        self.path = path
        self._data = self._load()

    def _load(self) -> Dict[str, Any]:
        if not self.path.is_file():
            logger.warning(f"Config file not found at: {self.path}; using defaults")
            return {}
        try:
            with open(self.path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (IOError, yaml.YAMLError) as e:
            raise ConfigValidationError(f"Cannot read config {self.path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigValidationError(f"Config {self.path} must hold a mapping, got {type(data).__name__}")
        return data

    def get_field_value(self, field: FieldInfo, field_name: str) -> tuple[Any, str, bool]:
        return self._data.get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return dict(self._data)


class PipelineSettings(BaseSettings):
    """
    The main settings class for the pipeline.

    It loads settings from the following sources, in order of precedence:
    1. Keyword arguments (the CLI's --seed).
    2. Environment variables (e.g., `CCE_SEGMENTATION__THRESHOLD=0.6`).
    3. The YAML/JSON document (`configs/pipeline.yaml` unless --config is given).
    4. Default values defined in the models.
    """
    paths: PathsSettings = Field(default_factory=PathsSettings)
    phantom: PhantomSettings = Field(default_factory=PhantomSettings)
    split: SplitSettings = Field(default_factory=SplitSettings)
    recognition: RecognitionSettings = Field(default_factory=RecognitionSettings)
    segmentation: SegmentationSettings = Field(default_factory=SegmentationSettings)
    sizing: SizingSettings = Field(default_factory=SizingSettings)
    characterization: CharacterizationSettings = Field(default_factory=CharacterizationSettings)
    stages: StageSettings = Field(default_factory=StageSettings)
    workers: int = Field(1, ge=1, description="Threads for per-image inference")
    seed: int = Field(0, ge=0, lt=2**64)

    model_config = SettingsConfigDict(
        env_prefix="CCE_",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            YamlConfigSource(settings_cls, _config_path.get() or DEFAULT_CONFIG_PATH),
        )

    def stage_seed(self, stage: str) -> int:
        """Seed of a named stage, derived from the root seed."""
        return Rng(self.seed).spawn(stage).next_u64()

    def stage_train(self, cfg: TrainConfig, stage: str) -> TrainConfig:
        return cfg.model_copy(update={"seed": self.stage_seed(stage)})


def load_settings(config_path: Optional[Path] = None, **overrides) -> PipelineSettings:
    """
    Builds validated settings from `config_path` (default configs/pipeline.yaml).
    Raises ConfigValidationError on a missing explicit file or any invalid field.
    """
    if config_path is not None and not Path(config_path).is_file():
        raise ConfigValidationError(f"Config file not found: {config_path}")
    token = _config_path.set(Path(config_path) if config_path is not None else None)
    try:
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return PipelineSettings(**overrides)
    except ValidationError as e:
        raise ConfigValidationError(f"Invalid configuration: {e}") from e
    finally:
        _config_path.reset(token)
