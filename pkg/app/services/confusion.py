"""
Consistency check of the published CCE-vs-HP size confusion matrix.

Rows are CCE size buckets, columns histopathology buckets (<=6, 6-10, 10-20,
>=20 mm).
"""
from __future__ import annotations

import logging

import numpy as np
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

PUBLISHED_MATRIX = np.array([
    [36, 1, 0, 0],
    [17, 1, 1, 0],
    [25, 26, 74, 14],
    [0, 5, 42, 38],
], dtype=np.int64)
PUBLISHED_TOTAL = 280
PUBLISHED_COLUMN_SUMS = (78, 33, 117, 52)


class ConsistencyReport(BaseModel):
    passed: bool
    vacuous: bool = False
    total: int
    column_sums: list[int]
    cce_at_least_hp: int = Field(..., description="Pairs whose CCE bucket is >= the HP bucket")
    cce_at_most_hp: int
    failures: list[str] = Field(default_factory=list)


def confusion_consistency(matrix: np.ndarray, reference: np.ndarray = PUBLISHED_MATRIX,
                          expected_total: int = PUBLISHED_TOTAL,
                          expected_columns: tuple[int, ...] = PUBLISHED_COLUMN_SUMS) -> ConsistencyReport:
    """
    Checks a 4x4 bucket matrix against the published one: each entry, the
    total, the column sums and non-negativity. An all-zero matrix (no pairs)
    passes vacuously.
    """
    matrix = np.asarray(matrix, dtype=np.int64)
    if matrix.shape != (4, 4):
        raise ValueError(f"Expected a 4x4 matrix, got shape {matrix.shape}")
    rows, cols = np.indices(matrix.shape)
    total = int(matrix.sum())
    column_sums = [int(v) for v in matrix.sum(axis=0)]
    report = dict(
        total=total,
        column_sums=column_sums,
        cce_at_least_hp=int(matrix[rows >= cols].sum()),
        cce_at_most_hp=int(matrix[rows <= cols].sum()),
    )
    if total == 0 and not np.any(matrix):
        logger.warning("Confusion matrix is empty; consistency check passes vacuously")
        return ConsistencyReport(passed=True, vacuous=True, **report)

    failures = []
    for r, c in zip(*np.nonzero(matrix < 0)):
        failures.append(f"cell (row {r}, col {c}) is negative: {matrix[r, c]}")
    for r, c in zip(*np.nonzero(matrix != reference)):
        failures.append(f"cell (row {r}, col {c}) = {matrix[r, c]}, expected {reference[r, c]}")
    if total != expected_total:
        failures.append(f"total = {total}, expected {expected_total}")
    for c, (got, want) in enumerate(zip(column_sums, expected_columns)):
        if got != want:
            failures.append(f"column {c} sum = {got}, expected {want}")
    for failure in failures:
        logger.error(f"Confusion consistency: {failure}")
    return ConsistencyReport(passed=not failures, failures=failures, **report)
