"""
End-to-end test of the pipeline on a tiny phantom dataset.

The dataset is generated, every network trained for one epoch and the size
regressor fitted once per module; the tests then exercise evaluation, the full
run and the recognition gate against those artifacts. Trained weights are far
from useful at this scale, so the assertions concern plumbing and
determinism, not accuracy.
"""
import filecmp
import shutil

import numpy as np
import pytest
import yaml

from app import pipeline
from app.agents.report import FINDINGS_NAME, read_findings
from app.config import load_settings
from app.models import RecognitionLabel, Split
from app.nn.serialize import load_params, save_params

from .conftest import tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A settings object whose dataset, models and sizer are all on disk."""
    root = tmp_path_factory.mktemp("e2e")
    path = root / "pipeline.yaml"
    path.write_text(yaml.safe_dump(tiny_config(root)), encoding="utf-8")
    settings = load_settings(path, seed=7)

    pipeline.generate(settings)
    pipeline.train_recognizer(settings)
    pipeline.train_segmenter_stage(settings)
    pipeline.train_characterizer_stage(settings)
    pipeline.fit_sizer(settings)
    return settings


def _relocated(settings, root, models=None):
    paths = settings.paths.model_copy(update={
        "model_dir": models or settings.paths.model_dir,
        "report_dir": root / "reports",
    })
    return settings.model_copy(update={"paths": paths})


def _force_recognizer(settings, positive: bool):
    path = pipeline.artifact_path(settings, "recognition")
    params = load_params(path)
    params["fc2"]["W"] = np.zeros_like(params["fc2"]["W"])
    params["fc2"]["b"] = np.array([0.0, 10.0]) if positive else np.array([10.0, 0.0])
    save_params(path, params)


def test_generation_is_byte_identical_for_a_seed(tmp_path):
    trees = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        path = root / "pipeline.yaml"
        path.write_text(yaml.safe_dump(tiny_config(root)), encoding="utf-8")
        settings = load_settings(path)
        pipeline.generate(settings)
        trees.append(root / "data")
    cmp = filecmp.dircmp(*trees)
    assert not cmp.left_only and not cmp.right_only
    assert (trees[0] / "manifest.jsonl").is_file()
    for p in trees[0].rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (trees[1] / p.relative_to(trees[0])).read_bytes()


def test_artifacts_are_written(trained):
    for stage in pipeline.STAGES:
        assert pipeline.artifact_path(trained, stage).is_file()


def test_evaluate_covers_every_stage(trained):
    results = pipeline.evaluate(trained)
    assert set(results) == set(pipeline.STAGES)
    assert results["sizing"]["pairs"] > 0
    assert results["segmentation"]["aid_u_net"]["images"] > 0
    assert (trained.paths.report_dir / "evaluation.json").is_file()
    assert "sensitivity=" in pipeline.format_evaluation(results)


def test_single_stage_evaluation(trained):
    results = pipeline.evaluate(trained, "recognition")
    assert set(results) == {"recognition"}


def test_run_is_deterministic_across_worker_counts(trained, tmp_path):
    outputs = []
    for name, workers in (("one", 1), ("again", 1), ("two", 2)):
        settings = _relocated(trained, tmp_path / name).model_copy(update={"workers": workers})
        findings = pipeline.run_pipeline(settings)
        assert len(findings) == 7
        text = (tmp_path / name / "reports" / FINDINGS_NAME).read_text(encoding="utf-8")
        outputs.append(text.replace(str(tmp_path / name), "<root>"))
    assert outputs[0] == outputs[1] == outputs[2]


def test_findings_keep_input_order(trained, tmp_path):
    settings = _relocated(trained, tmp_path)
    test = pipeline.load_split(settings, Split.TEST)
    findings = pipeline.run_pipeline(settings, test)
    assert [f.id for f in findings] == [s.id for s in test]
    assert [f.id for f in read_findings(tmp_path / "reports" / FINDINGS_NAME)] == [s.id for s in test]


def test_positive_frames_get_size_and_characterization(trained, tmp_path):
    models = tmp_path / "models"
    shutil.copytree(trained.paths.model_dir, models)
    settings = _relocated(trained, tmp_path, models)
    _force_recognizer(settings, positive=True)

    findings = pipeline.run_pipeline(settings)
    for f in findings:
        assert f.recognition_label == RecognitionLabel.C_POLYP
        assert f.region_count is not None
        assert f.segmentation_verdict is not None
        assert f.neoplastic is not None
        assert f.spectrum_path is not None
        assert f.error is None
    assert (tmp_path / "reports" / "summary.txt").read_text().startswith("7 images: 7 C-Polyp")


def test_negative_frames_skip_size_and_characterization(trained, tmp_path):
    models = tmp_path / "models"
    shutil.copytree(trained.paths.model_dir, models)
    settings = _relocated(trained, tmp_path, models)
    _force_recognizer(settings, positive=False)

    findings = pipeline.run_pipeline(settings)
    for f in findings:
        assert f.recognition_label == RecognitionLabel.NO_C_POLYP
        assert f.cce_mm is None
        assert f.region_count is None
        assert f.neoplastic is None
        assert f.saliency_path is not None
    assert (tmp_path / "reports" / "summary.txt").read_text().startswith("7 images: 0 C-Polyp, 7 No-C-Polyp")


SIZE_FIELDS = ("cce_mm", "hp_mm_predicted", "size_bucket", "segmentation_verdict", "region_count")
CHARACTERIZATION_FIELDS = ("neoplastic", "neoplastic_confidence")


def _fields(findings, names):
    return {f.id: tuple(getattr(f, name) for name in names) for f in findings}


def test_disabling_one_stage_leaves_the_other_untouched(trained, tmp_path):
    models = tmp_path / "models"
    shutil.copytree(trained.paths.model_dir, models)
    base = _relocated(trained, tmp_path / "full", models)
    _force_recognizer(base, positive=True)
    full = pipeline.run_pipeline(base)

    def run_without(name, toggle):
        settings = _relocated(trained, tmp_path / name, models)
        stages = settings.stages.model_copy(update={toggle: False})
        return pipeline.run_pipeline(settings.model_copy(update={"stages": stages}))

    no_sizing = run_without("no-sizing", "enable_sizing")
    assert all(f.cce_mm is None and f.region_count is None for f in no_sizing)
    assert _fields(no_sizing, CHARACTERIZATION_FIELDS) == _fields(full, CHARACTERIZATION_FIELDS)

    no_characterization = run_without("no-characterization", "enable_characterization")
    assert all(f.neoplastic is None and f.spectrum_path is None for f in no_characterization)
    assert _fields(no_characterization, SIZE_FIELDS) == _fields(full, SIZE_FIELDS)
