"""
Agent responsible for writing the finding reports.
"""
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Any

from .base import Agent
from app.models import FindingReport, RecognitionLabel

FINDINGS_NAME = "findings.jsonl"
SUMMARY_NAME = "summary.txt"


def round_significant(value: Any, digits: int = 6) -> Any:
    """Rounds every float in a JSON-like structure to `digits` significant digits."""
    if isinstance(value, float):
        return float(f"{value:.{digits}g}")
    if isinstance(value, dict):
        return {k: round_significant(v, digits) for k, v in value.items()}
    if isinstance(value, list):
        return [round_significant(v, digits) for v in value]
    return value


def finding_to_json(finding: FindingReport) -> str:
    return json.dumps(round_significant(finding.model_dump(mode="json")))


def read_findings(path: Path) -> list[FindingReport]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [FindingReport.model_validate_json(line) for line in fh if line.strip()]


class ReportAgent(Agent):
    """
    This agent writes one JSON line per finding plus a human-readable
    summary of the run.
    """

    stage = "report"

    def __init__(self, report_dir: Path):
        """
        Initializes the ReportAgent.

        Args:
            report_dir: Directory receiving findings.jsonl and summary.txt.
        """
        self.report_dir = Path(report_dir)
        self.logger = logging.getLogger(self.__class__.__name__)

    def run(self, findings: list[FindingReport]) -> str:
        """
        Writes the findings and the summary; returns the one-line summary.
        """
        self.report_dir.mkdir(parents=True, exist_ok=True)
        findings_path = self.report_dir / FINDINGS_NAME
        with findings_path.open("w", encoding="utf-8") as fh:
            for finding in findings:
                fh.write(finding_to_json(finding) + "\n")
        summary = self._format_report(findings)
        (self.report_dir / SUMMARY_NAME).write_text(summary + "\n", encoding="utf-8")
        self.logger.info(f"Wrote {len(findings)} findings to {findings_path}")
        return summary.splitlines()[0]

    def _format_report(self, findings: list[FindingReport]) -> str:
        """Formats the run into a human-readable string; the first line is the CLI summary."""
        flagged = [f for f in findings if f.recognition_label == RecognitionLabel.C_POLYP]
        errors = [f for f in findings if f.error]
        verdicts = Counter(f.segmentation_verdict.value for f in flagged if f.segmentation_verdict)
        buckets = Counter(f.size_bucket.value for f in flagged if f.size_bucket)
        neoplastic = sum(1 for f in flagged if f.neoplastic)
        negatives = sum(1 for f in findings if f.recognition_label == RecognitionLabel.NO_C_POLYP)
        report_lines = [
            f"{len(findings)} images: {len(flagged)} C-Polyp, {negatives} No-C-Polyp, "
            f"{len(errors)} errors",
            "---------------------------",
            "Segmentation verdicts",
            *(f"  - {name}: {count}" for name, count in sorted(verdicts.items())),
            "Predicted HP size buckets",
            *(f"  - {name}: {count}" for name, count in sorted(buckets.items())),
            "Characterization",
            f"  - neoplastic: {neoplastic}",
            f"  - non-neoplastic: {sum(1 for f in flagged if f.neoplastic is False)}",
        ]
        if errors:
            report_lines.append("Errors")
            report_lines += [f"  - {f.id}: {f.error}" for f in errors]
        return "\n".join(report_lines)

    def summary_line(self, findings: list[FindingReport]) -> str:
        return self._format_report(findings).splitlines()[0]

    def summarize(self, findings_path: Path) -> str:
        """Re-renders summary.txt from an existing findings file."""
        findings = read_findings(findings_path)
        summary = self._format_report(findings)
        (self.report_dir / SUMMARY_NAME).write_text(summary + "\n", encoding="utf-8")
        return summary.splitlines()[0]
