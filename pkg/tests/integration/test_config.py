import json

import pytest
import yaml

from app import pipeline
from app.config import DEFAULT_CONFIG_PATH, load_settings
from app.errors import ConfigValidationError
from app.nn.train import TrainConfig

from .conftest import tiny_config


def test_shipped_defaults_load():
    settings = load_settings(DEFAULT_CONFIG_PATH)
    assert settings.seed == 42
    assert settings.phantom.image_size == 64
    assert settings.segmentation.direct_depth == 2 and settings.segmentation.sub_depth == 2
    assert settings.recognition.finetune.validation_patience == 4


def test_yaml_values_override_model_defaults(write_config):
    settings = load_settings(write_config())
    assert settings.seed == 7
    assert settings.phantom.image_size == 16
    assert settings.phantom.fov_mm == 40.0
    assert settings.segmentation.base_channels == 2


def test_json_documents_are_accepted(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_config(tmp_path, seed=11)), encoding="utf-8")
    assert load_settings(path).seed == 11


def test_environment_overrides_the_document(write_config, monkeypatch):
    monkeypatch.setenv("CCE_SEGMENTATION__THRESHOLD", "0.6")
    monkeypatch.setenv("CCE_WORKERS", "3")
    settings = load_settings(write_config())
    assert settings.segmentation.threshold == 0.6
    assert settings.segmentation.direct_depth == 1
    assert settings.workers == 3


def test_explicit_seed_wins(write_config, monkeypatch):
    monkeypatch.setenv("CCE_SEED", "5")
    assert load_settings(write_config(), seed=3).seed == 3
    assert load_settings(write_config(), seed=None).seed == 5


@pytest.mark.parametrize(
    "sections",
    [
        {"segmentation": {"threshold": 1.5}},             # outside (0, 1)
        {"phantom": {"periphery_band_px": 4}},            # band too wide for 16 px
        {"workers": 0},
        {"recognition": {"fine_tune_last_k": -1}},
        {"not_a_section": {"x": 1}},                       # unknown keys are rejected
    ],
)
def test_invalid_documents_are_rejected(write_config, sections):
    with pytest.raises(ConfigValidationError):
        load_settings(write_config(**sections))


def test_missing_document_is_rejected(tmp_path):
    with pytest.raises(ConfigValidationError):
        load_settings(tmp_path / "nope.yaml")


def test_non_mapping_document_is_rejected(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text(yaml.safe_dump([1, 2, 3]), encoding="utf-8")
    with pytest.raises(ConfigValidationError):
        load_settings(path)


def test_stage_seeds_are_derived_from_the_root_seed(write_config):
    settings = load_settings(write_config())
    assert settings.stage_seed("segmentation") == load_settings(write_config()).stage_seed("segmentation")
    assert settings.stage_seed("segmentation") != settings.stage_seed("characterization")
    assert settings.stage_seed("segmentation") != load_settings(write_config(), seed=8).stage_seed("segmentation")
    cfg = settings.stage_train(TrainConfig(seed=0), "segmentation")
    assert cfg.seed == settings.stage_seed("segmentation")


def test_segmenter_depth_must_fit_the_frame(write_config):
    settings = load_settings(write_config(segmentation={"direct_depth": 3, "sub_depth": 2}))
    with pytest.raises(ConfigValidationError):
        pipeline.segmenter_net(settings)
