import json

import pytest

from app.cli import EXIT_OK, EXIT_VALIDATION, main


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "generate" in capsys.readouterr().out


def test_unknown_flag_is_invalid_input():
    assert main(["generate", "--frobnicate"]) == EXIT_VALIDATION


def test_missing_config_is_invalid_input(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.yaml")]) == EXIT_VALIDATION
    assert capsys.readouterr().out.startswith("error:")


def test_invalid_config_is_invalid_input(write_config, capsys):
    path = write_config(segmentation={"threshold": 2.0})
    assert main(["generate", "--config", str(path)]) == EXIT_VALIDATION
    assert "error:" in capsys.readouterr().out


def test_run_without_models_names_the_missing_stage(write_config, capsys):
    assert main(["run", "--config", str(write_config())]) == EXIT_VALIDATION
    assert "recognition" in capsys.readouterr().out


def test_generate_writes_the_manifest(write_config, tmp_path, capsys):
    assert main(["generate", "--config", str(write_config())]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("generated 24 samples")
    assert (tmp_path / "data" / "manifest.jsonl").is_file()


def test_train_before_generate_is_invalid_input(write_config):
    assert main(["train", "segmenter", "--config", str(write_config())]) == EXIT_VALIDATION


def test_report_without_findings_is_invalid_input(write_config, capsys):
    assert main(["report", "--config", str(write_config())]) == EXIT_VALIDATION
    assert "report" in capsys.readouterr().out


def test_check_confusion_passes_on_the_published_matrix(write_config, tmp_path, capsys):
    assert main(["check-confusion", "--config", str(write_config())]) == EXIT_OK
    assert capsys.readouterr().out.startswith("confusion check passed: total 280")
    report = json.loads((tmp_path / "reports" / "confusion_check.json").read_text())
    assert report["passed"] is True


@pytest.mark.parametrize("rows", ["12.0,9.0\n", ""])
def test_check_confusion_rejects_other_pairs(write_config, tmp_path, rows, capsys):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("cce_mm,hp_mm\n" + rows, encoding="utf-8")
    code = main(["check-confusion", "--config", str(write_config()), "--pairs", str(pairs)])
    if rows:
        assert code == EXIT_VALIDATION
        assert "expected 280" in capsys.readouterr().out
    else:
        assert code == EXIT_OK
        assert "(vacuous)" in capsys.readouterr().out
