import os

import pytest
import yaml


@pytest.fixture(autouse=True)
def clear_pipeline_environment(monkeypatch):
    """
    An autouse fixture that removes CCE_* environment variables before each
    integration test, so overrides set in the developer's shell (or by an
    earlier test) never leak into the settings under test.
    """
    for key in list(os.environ):
        if key.upper().startswith("CCE_"):
            monkeypatch.delenv(key, raising=False)
    yield


def tiny_config(root, **sections) -> dict:
    """A configuration small enough to generate, train and run in seconds."""
    config = {
        "seed": 7,
        "workers": 1,
        "paths": {
            "dataset_dir": str(root / "data"),
            "model_dir": str(root / "models"),
            "report_dir": str(root / "reports"),
        },
        "phantom": {
            "image_size": 16,
            "periphery_band_px": 2,
            "polyp_diameter_range_mm": [12.0, 25.0],
            "neoplastic_fraction": 0.5,
            "n_polyp": 12,
            "n_normal": 12,
            "pretext_count": 8,
        },
        "recognition": {
            "pretrain": {"initial_lr": 0.05, "max_epochs": 1, "batch_size": 4},
            "finetune": {"initial_lr": 0.05, "max_epochs": 1, "batch_size": 4},
        },
        "segmentation": {
            "direct_depth": 1,
            "sub_depth": 1,
            "base_channels": 2,
            "convs_per_block": 1,
            "train": {"initial_lr": 0.05, "max_epochs": 1, "batch_size": 4},
        },
        "characterization": {
            "augment_factor": 2,
            "train": {"initial_lr": 0.05, "max_epochs": 1, "batch_size": 4},
        },
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            config.setdefault(name, {}).update(values)
        else:
            config[name] = values
    return config


@pytest.fixture
def write_config(tmp_path):
    """Writes a tiny configuration under tmp_path and returns its path."""
    def _write(name="pipeline.yaml", root=None, **sections):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(tiny_config(root or tmp_path, **sections)), encoding="utf-8")
        return path
    return _write
