"""
Command-line surface.

Every subcommand prints one summary line to stdout and writes full detail to
files and to the JSON log on stderr. Exit codes: 0 success, 2 invalid input
(configuration, dataset, missing artifact, failed consistency check), 1 any
other error.
"""
import argparse
import logging
from pathlib import Path
from typing import Optional

from app.agents.report import FINDINGS_NAME, ReportAgent
from app.config import load_settings
from app.errors import ConsistencyCheckError, MissingArtifactError, ValidationClassError
from app.log_config import setup_logging
from app.models import Split
from app import pipeline
from app.services.confusion import PUBLISHED_MATRIX, confusion_consistency
from app.services.sizing import confusion, format_confusion, read_pairs_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2

TRAIN_TARGETS = {
    "recognizer": "recognition",
    "segmenter": "segmentation",
    "characterizer": "characterization",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML or JSON configuration document.")
    common.add_argument("--seed", type=int, default=None, help="Root seed; overrides the configuration.")

    ap = argparse.ArgumentParser(prog="python -m app", description="Colon capsule endoscopy image-analysis pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="Render, split and write the phantom dataset.")
    train = sub.add_parser("train", parents=[common], help="Train one network.")
    train.add_argument("target", choices=sorted(TRAIN_TARGETS))
    sub.add_parser("fit-sizer", parents=[common], help="Fit the CCE-to-histopathology size regressor.")
    evaluate = sub.add_parser("evaluate", parents=[common], help="Evaluate trained stages on the test split.")
    evaluate.add_argument("stage", nargs="?", choices=pipeline.STAGES, default=None)
    sub.add_parser("run", parents=[common], help="Run the full pipeline on the test split.")
    sub.add_parser("report", parents=[common], help="Re-render the summary from the last run's findings.")
    check = sub.add_parser("check-confusion", parents=[common],
                           help="Check a CCE-vs-HP size confusion matrix against the published one.")
    check.add_argument("--pairs", type=Path, default=None,
                       help="CSV with cce_mm,hp_mm columns; defaults to the published matrix itself.")
    return ap


def _generate(settings, args) -> str:
    manifest = pipeline.generate(settings)
    counts = {split.value: len(manifest.by_split(split)) for split in Split}
    return f"generated {len(manifest.records)} samples in {settings.paths.dataset_dir} {counts}"


def _train(settings, args) -> str:
    stage = TRAIN_TARGETS[args.target]
    if stage == "recognition":
        result = pipeline.train_recognizer(settings).finetune
    elif stage == "segmentation":
        _, result = pipeline.train_segmenter_stage(settings)
    else:
        result = pipeline.train_characterizer_stage(settings)
    final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    return f"trained {args.target}: {len(result.epoch_losses)} epochs, final loss {final:.6g} -> {pipeline.artifact_path(settings, stage)}"


def _fit_sizer(settings, args) -> str:
    regressor = pipeline.fit_sizer(settings)
    return f"fitted size regressor on {len(regressor.support)} pairs, training RMSE {regressor.training_rmse:.6g} mm"


def _evaluate(settings, args) -> str:
    return pipeline.format_evaluation(pipeline.evaluate(settings, args.stage))


def _run(settings, args) -> str:
    findings = pipeline.run_pipeline(settings)
    return ReportAgent(settings.paths.report_dir).summary_line(findings)


def _report(settings, args) -> str:
    report_dir = Path(settings.paths.report_dir)
    findings_path = report_dir / FINDINGS_NAME
    if not findings_path.is_file():
        raise MissingArtifactError("report", findings_path)
    return ReportAgent(report_dir).summarize(findings_path)


def _check_confusion(settings, args) -> str:
    matrix = confusion(read_pairs_csv(args.pairs)) if args.pairs else PUBLISHED_MATRIX
    logger.info("Confusion matrix under check:\n" + format_confusion(matrix))
    report = confusion_consistency(matrix)
    out = Path(settings.paths.report_dir) / "confusion_check.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    if not report.passed:
        raise ConsistencyCheckError("; ".join(report.failures))
    suffix = " (vacuous)" if report.vacuous else ""
    return (f"confusion check passed{suffix}: total {report.total}, column sums {report.column_sums}, "
            f"cce>=hp {report.cce_at_least_hp}, cce<=hp {report.cce_at_most_hp}")


COMMANDS = {
    "generate": _generate,
    "train": _train,
    "fit-sizer": _fit_sizer,
    "evaluate": _evaluate,
    "run": _run,
    "report": _report,
    "check-confusion": _check_confusion,
}


def main(argv: Optional[list[str]] = None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION

    try:
        settings = load_settings(args.config, seed=args.seed)
        print(COMMANDS[args.command](settings, args))
        return EXIT_OK
    except ValidationClassError as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.critical(f"{args.command} failed: {e}", exc_info=True)
        print(f"internal error: {e}")
        return EXIT_INTERNAL
