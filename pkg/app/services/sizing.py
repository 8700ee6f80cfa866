"""
Polyp size estimation: periphery crop, moment-based ellipse fit and diameter
ratio, then a kernel ridge regressor mapping CCE size to histopathology size,
with robust outlier screening and clinical size buckets.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from app.errors import DatasetError, GeometryError, NotPositiveDefiniteError
from app.models import EllipseFit, SizeBucket
from app.nn.linalg import cholesky_solve, jacobi_eigen

logger = logging.getLogger(__name__)

MIN_ELLIPSE_PX = 5
_DEGENERATE_TOL = 1e-12

BUCKET_LABELS = ("<=6mm", "6-10mm", "10-20mm", ">=20mm")


def crop_periphery(image: np.ndarray, band_px: int) -> np.ndarray:
    """Removes `band_px` pixels from every border of an (H, W) or (C, H, W) array."""
    if band_px < 0:
        raise GeometryError(f"band_px must be >= 0, got {band_px}")
    h, w = image.shape[-2:]
    if band_px >= min(h, w) / 2:
        raise GeometryError(f"Band of {band_px} px leaves nothing of a {h}x{w} image")
    if band_px == 0:
        return image
    return image[..., band_px:h - band_px, band_px:w - band_px]


def fit_ellipse(mask: np.ndarray) -> EllipseFit:
    """
    Ellipse with the same second central moments as the region: diameters are
    4 * sqrt(eigenvalue) of the population covariance of pixel coordinates.
    """
    rows, cols = np.nonzero(np.asarray(mask) > 0)
    if len(rows) < MIN_ELLIPSE_PX:
        raise GeometryError(f"fit_ellipse needs at least {MIN_ELLIPSE_PX} pixels, got {len(rows)}")
    coords = np.stack([rows, cols]).astype(np.float64)
    cov = np.cov(coords, bias=True)
    values, vectors = jacobi_eigen(cov)
    major_var, minor_var = max(values[0], 0.0), max(values[1], 0.0)
    degenerate = minor_var <= _DEGENERATE_TOL * max(major_var, 1.0)
    v_row, v_col = vectors[:, 0]
    orientation = math.atan2(v_row, v_col) % math.pi
    if orientation >= math.pi:
        orientation = 0.0
    return EllipseFit(
        centroid=(float(coords[0].mean()), float(coords[1].mean())),
        major_diameter=4.0 * math.sqrt(major_var),
        minor_diameter=0.0 if degenerate else 4.0 * math.sqrt(minor_var),
        orientation=orientation,
        bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
        degenerate=degenerate,
    )


def size_ratio(fit: EllipseFit, dims: tuple[int, int]) -> float:
    """Major diameter over the shorter side of the (cropped) frame."""
    return fit.major_diameter / min(dims)


def estimate_cce_mm(mask: np.ndarray, band_px: int, fov_mm: float) -> tuple[float, EllipseFit]:
    """CCE size in mm of a full-frame mask: crop, fit, ratio times field of view."""
    cropped = crop_periphery(mask, band_px)
    fit = fit_ellipse(cropped)
    return size_ratio(fit, cropped.shape[-2:]) * fov_mm, fit


def bucket(size_mm: float) -> SizeBucket:
    if size_mm < 0:
        raise ValueError(f"Size must be >= 0 mm, got {size_mm}")
    if size_mm <= 6:
        return SizeBucket.B0
    if size_mm < 10:
        return SizeBucket.B1
    if size_mm < 20:
        return SizeBucket.B2
    return SizeBucket.B3


def confusion(pairs: Sequence[tuple[float, float]]) -> np.ndarray:
    """4x4 counts, rows = CCE bucket, columns = HP bucket."""
    matrix = np.zeros((4, 4), dtype=np.int64)
    for cce_mm, hp_mm in pairs:
        matrix[bucket(cce_mm).index, bucket(hp_mm).index] += 1
    return matrix


def format_confusion(matrix: np.ndarray) -> str:
    width = max(len(label) for label in BUCKET_LABELS) + 2
    lines = ["CCE \\ HP".ljust(width) + "".join(label.rjust(width) for label in BUCKET_LABELS)]
    for label, row in zip(BUCKET_LABELS, matrix):
        lines.append(label.ljust(width) + "".join(str(int(v)).rjust(width) for v in row))
    return "\n".join(lines)


def bucket_agreement(predicted_mm: Sequence[float], true_mm: Sequence[float]) -> Optional[float]:
    """Fraction of pairs whose two sizes fall in the same bucket; None for no pairs."""
    if len(predicted_mm) == 0:
        return None
    same = sum(bucket(p) == bucket(t) for p, t in zip(predicted_mm, true_mm))
    return same / len(predicted_mm)


def rmse(predicted: Sequence[float], truth: Sequence[float]) -> float:
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


class SizeRegressor:
    """
    Kernel ridge regression with an RBF kernel exp(-d^2 / (2 gamma^2)) on the
    z-scored input; the target is centered, so far from the data predictions
    return to the training mean.
    """

    def __init__(self, kernel_scale: float = 0.25, ridge: float = 1e-3):
        if kernel_scale <= 0:
            raise ValueError(f"kernel_scale must be > 0, got {kernel_scale}")
        if ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {ridge}")
        self.kernel_scale = kernel_scale
        self.ridge = ridge
        self.x_mean = 0.0
        self.x_std = 1.0
        self.y_mean = 0.0
        self.support: Optional[np.ndarray] = None
        self.weights: Optional[np.ndarray] = None
        self.training_rmse: Optional[float] = None

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = a[:, None] - b[None, :]
        return np.exp(-(d * d) / (2.0 * self.kernel_scale ** 2))

    def _standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def fit(self, x: Sequence[float], y: Sequence[float]) -> "SizeRegressor":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(x) < 2 or len(x) != len(y):
            raise DatasetError(f"SizeRegressor needs >= 2 paired points, got {len(x)} x and {len(y)} y")
        if self.ridge == 0 and len(np.unique(x)) < len(x):
            raise NotPositiveDefiniteError("Duplicate inputs make the kernel matrix singular without a ridge term")
        self.x_mean = float(x.mean())
        std = float(x.std())
        self.x_std = std if std > 0 else 1.0
        self.y_mean = float(y.mean())
        self.support = self._standardize(x)
        gram = self._kernel(self.support, self.support) + self.ridge * np.eye(len(x))
        self.weights = cholesky_solve(gram, y - self.y_mean)
        self.training_rmse = rmse(self.predict(x), y)
        logger.info(f"Fitted size regressor on {len(x)} pairs: training RMSE {self.training_rmse:.3f} mm",
                    extra={"pairs": len(x), "training_rmse": self.training_rmse})
        return self

    def predict(self, x) -> np.ndarray:
        if self.weights is None:
            raise RuntimeError("SizeRegressor.predict called before fit")
        z = self._standardize(np.atleast_1d(x))
        return self.y_mean + self._kernel(z, self.support) @ self.weights

    def to_dict(self) -> dict:
        return {
            "kernel_scale": self.kernel_scale,
            "ridge": self.ridge,
            "x_mean": self.x_mean,
            "x_std": self.x_std,
            "y_mean": self.y_mean,
            "support": [] if self.support is None else self.support.tolist(),
            "weights": [] if self.weights is None else self.weights.tolist(),
            "training_rmse": self.training_rmse,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SizeRegressor":
        reg = cls(kernel_scale=data["kernel_scale"], ridge=data["ridge"])
        reg.x_mean, reg.x_std, reg.y_mean = data["x_mean"], data["x_std"], data["y_mean"]
        reg.support = np.asarray(data["support"], dtype=np.float64)
        reg.weights = np.asarray(data["weights"], dtype=np.float64)
        reg.training_rmse = data.get("training_rmse")
        return reg

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "SizeRegressor":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def remove_outliers(cce_mm: Sequence[float], hp_mm: Sequence[float], mad_multiplier: float = 3.0,
                    floor_mm: float = 0.5) -> np.ndarray:
    """
    Boolean mask of pairs flagged as outliers: residuals from a Theil-Sen line
    deviating from their median by more than max(mad_multiplier * MAD, floor_mm).
    """
    x = np.asarray(cce_mm, dtype=np.float64)
    y = np.asarray(hp_mm, dtype=np.float64)
    if len(x) < 5:
        raise DatasetError(f"remove_outliers needs at least 5 pairs, got {len(x)}")
    if np.ptp(x) == 0:
        slope, intercept = 0.0, float(np.median(y))
    else:
        slope, intercept = stats.theilslopes(y, x)[:2]
    residuals = y - (intercept + slope * x)
    deviation = np.abs(residuals - np.median(residuals))
    threshold = max(mad_multiplier * float(np.median(deviation)), floor_mm)
    flagged = deviation > threshold
    if flagged.any():
        logger.info(f"Flagged {int(flagged.sum())} of {len(x)} size pairs as outliers (threshold {threshold:.3f} mm)")
    return flagged


def write_pairs_csv(path: Path, rows: Sequence[dict]) -> None:
    """Rows of {id, cce_mm, hp_mm, flagged}; bucket columns are derived."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "cce_mm", "hp_mm", "bucket_cce", "bucket_hp", "flagged"])
        for row in rows:
            writer.writerow([
                row["id"], f"{row['cce_mm']:.6g}", f"{row['hp_mm']:.6g}",
                bucket(row["cce_mm"]).value, bucket(row["hp_mm"]).value, str(bool(row["flagged"])).lower(),
            ])


def read_pairs_csv(path: Path) -> list[tuple[float, float]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return [(float(r["cce_mm"]), float(r["hp_mm"])) for r in csv.DictReader(fh)]


def _draw_line(canvas: np.ndarray, r0: float, c0: float, r1: float, c1: float, color) -> None:
    steps = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    for t in np.linspace(0.0, 1.0, steps + 1):
        r, c = int(round(r0 + t * (r1 - r0))), int(round(c0 + t * (c1 - c0)))
        if 0 <= r < canvas.shape[0] and 0 <= c < canvas.shape[1]:
            canvas[r, c] = color


def render_overlay(rgb: np.ndarray, fit: EllipseFit, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """
    Copy of an (H, W, 3) uint8 frame with the fit's bounding box in green and
    its ellipse outline in yellow. `offset` shifts fit coordinates, e.g. the
    crop band when the fit was made on a cropped mask.
    """
    canvas = rgb.copy()
    dr, dc = offset
    r0, c0, r1, c1 = (v + d for v, d in zip(fit.bbox, (dr, dc, dr, dc)))
    green, yellow = (0, 255, 0), (255, 255, 0)
    for a, b in (((r0, c0), (r0, c1)), ((r1, c0), (r1, c1)), ((r0, c0), (r1, c0)), ((r0, c1), (r1, c1))):
        _draw_line(canvas, *a, *b, green)
    cy, cx = fit.centroid[0] + dr, fit.centroid[1] + dc
    a, b = fit.major_diameter / 2, fit.minor_diameter / 2
    cos, sin = math.cos(fit.orientation), math.sin(fit.orientation)
    for t in np.linspace(0.0, 2 * math.pi, 180, endpoint=False):
        u, v = a * math.cos(t), b * math.sin(t)
        r, c = int(round(cy + u * sin + v * cos)), int(round(cx + u * cos - v * sin))
        if 0 <= r < canvas.shape[0] and 0 <= c < canvas.shape[1]:
            canvas[r, c] = yellow
    return canvas
