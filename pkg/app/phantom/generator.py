"""
Seeded synthetic CCE-like frames with ground truth.

Each frame is a textured mucosa background, optionally carrying one polyp
rendered as a textured ellipse with a slightly irregular boundary, framed by a
dark periphery band standing in for the capsule's date/time overlay. Every
sample is a pure function of (config, seed, index).
"""
from __future__ import annotations

import logging
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import ndimage

from app.errors import DatasetError
from app.models import PhantomSample
from app.nn.rng import Rng
from app.services.sizing import fit_ellipse

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
OVERLAY_VALUE = 0.0
_FLOOR = 0.05
_MAX_REDRAWS = 100

_MUCOSA_RGB = np.array([0.74, 0.45, 0.38])
_POLYP_RGB = np.array([0.86, 0.33, 0.27])


class PhantomConfig(BaseModel):
    """Rendering and ground-truth parameters for phantom frames."""
    image_size: int = Field(64, ge=16, description="Square frame side in pixels (3 channels)")
    fov_mm: float = Field(40.0, gt=0, description="Physical width spanned by the frame interior inside the periphery band")
    polyp_diameter_range_mm: tuple[float, float] = (2.0, 25.0)
    aspect_range: tuple[float, float] = Field((0.7, 1.0), description="Minor/major axis ratio range")
    boundary_irregularity: float = Field(0.06, ge=0, lt=0.3)
    background_frequency: float = Field(0.06, gt=0, description="Mucosa texture, cycles per pixel")
    background_contrast: float = Field(0.05, ge=0)
    polyp_frequency: float = Field(0.12, gt=0)
    polyp_contrast: float = Field(0.06, ge=0)
    neoplastic_frequency: float = Field(0.33, gt=0)
    neoplastic_texture_contrast: float = Field(0.22, ge=0)
    noise_sigma: float = Field(0.015, ge=0)
    periphery_band_px: int = Field(4, ge=0)
    neoplastic_fraction: float = Field(49 / 144, ge=0, le=1)
    hp_bias_alpha: float = Field(0.75, gt=0, le=1)
    hp_noise_sigma_mm: float = Field(1.5, ge=0)

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.periphery_band_px >= self.image_size / 4:
            raise ValueError(f"periphery_band_px must be < image_size/4, got {self.periphery_band_px}")
        low, high = self.polyp_diameter_range_mm
        if not 0 < low <= high:
            raise ValueError(f"polyp_diameter_range_mm must satisfy 0 < min <= max, got {low, high}")
        if high * (1 + self.boundary_irregularity) >= self.fov_mm * 0.9:
            raise ValueError(f"Largest polyp ({high} mm) does not fit inside the {self.fov_mm} mm field of view")
        return self

    @property
    def interior_px(self) -> int:
        return self.image_size - 2 * self.periphery_band_px

    @property
    def mm_per_px(self) -> float:
        return self.fov_mm / self.interior_px


def stamp_overlay(image: np.ndarray, band: int) -> np.ndarray:
    """Paints the periphery band with the overlay value on all channels."""
    if band > 0:
        image[:, :band, :] = OVERLAY_VALUE
        image[:, -band:, :] = OVERLAY_VALUE
        image[:, :, :band] = OVERLAY_VALUE
        image[:, :, -band:] = OVERLAY_VALUE
    return image


def quantize(image: np.ndarray) -> np.ndarray:
    return np.rint(image * 255.0) / 255.0


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _sinusoid(rng: Rng, rows, cols, frequency: float) -> np.ndarray:
    angle = rng.uniform(low=0.0, high=math.pi)
    phase = rng.uniform(low=0.0, high=2 * math.pi)
    return np.sin(2 * math.pi * frequency * (cols * math.cos(angle) + rows * math.sin(angle)) + phase)


def render_background(cfg: PhantomConfig, rng: Rng) -> np.ndarray:
    rows, cols = _grid(cfg.image_size)
    texture = 0.5 * (_sinusoid(rng, rows, cols, cfg.background_frequency)
                     + _sinusoid(rng, rows, cols, cfg.background_frequency * 1.7))
    center = (cfg.image_size - 1) / 2
    vignette = 1.0 - 0.25 * ((rows - center) ** 2 + (cols - center) ** 2) / center ** 2
    shade = vignette * (1.0 + cfg.background_contrast * texture)
    return _MUCOSA_RGB[:, None, None] * shade[None, :, :]


def render_polyp_mask(cfg: PhantomConfig, rng: Rng, diameter_mm: float) -> Optional[np.ndarray]:
    """An irregular filled ellipse placed inside the interior, or None if this draw does not fit."""
    size, band = cfg.image_size, cfg.periphery_band_px
    a = 0.5 * diameter_mm / cfg.mm_per_px
    b = a * rng.uniform(low=cfg.aspect_range[0], high=cfg.aspect_range[1])
    reach = a * (1 + cfg.boundary_irregularity) + 1
    low, high = band + reach, size - band - 1 - reach
    if low > high:
        return None
    cy = float(np.rint(rng.uniform(low=low, high=high)))
    cx = float(np.rint(rng.uniform(low=low, high=high)))
    phi = rng.uniform(low=0.0, high=math.pi)

    rows, cols = _grid(size)
    dr, dc = rows - cy, cols - cx
    u = dc * math.cos(phi) + dr * math.sin(phi)
    v = -dc * math.sin(phi) + dr * math.cos(phi)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    theta = np.arctan2(v / b, u / a)
    boundary = np.ones_like(theta)
    for k in (2, 3, 4):
        amp = cfg.boundary_irregularity / 3 * rng.uniform()
        boundary += amp * np.cos(k * theta + rng.uniform(low=0.0, high=2 * math.pi))
    # The centre pixel is always inside, so the mask is never empty.
    return (rho <= boundary).astype(np.uint8)


def render_polyp(cfg: PhantomConfig, rng: Rng, background: np.ndarray, mask: np.ndarray, neoplastic: bool) -> np.ndarray:
    rows, cols = _grid(cfg.image_size)
    if neoplastic:
        texture = _sinusoid(rng, rows, cols, cfg.neoplastic_frequency) * _sinusoid(rng, rows, cols, cfg.neoplastic_frequency)
        contrast = cfg.neoplastic_texture_contrast
    else:
        texture = _sinusoid(rng, rows, cols, cfg.polyp_frequency)
        contrast = cfg.polyp_contrast
    # Dome shading: brighter towards the polyp centre.
    dist = ndimage.distance_transform_edt(mask)
    dome = 1.0 + 0.15 * dist / max(float(dist.max()), 1.0)
    polyp = _POLYP_RGB[:, None, None] * (dome * (1.0 + contrast * texture))[None, :, :]
    return np.where(mask[None, :, :] > 0, polyp, background)


def moment_major_mm(mask: np.ndarray, cfg: PhantomConfig) -> Optional[float]:
    """Major diameter of the mask's moment ellipse in mm, or None below five pixels."""
    if int(mask.sum()) < 5:
        return None
    return fit_ellipse(mask).major_diameter * cfg.mm_per_px


def hp_size(cfg: PhantomConfig, rng: Rng, cce_mm: float) -> float:
    return max(0.5, cfg.hp_bias_alpha * cce_mm + rng.normal(sigma=cfg.hp_noise_sigma_mm))


def generate_sample(cfg: PhantomConfig, seed: int, index: int, has_polyp: bool, neoplastic: bool) -> PhantomSample:
    rng = Rng(seed).spawn(f"sample-{index}")
    image = render_background(cfg, rng.spawn("background"))
    mask = np.zeros((cfg.image_size, cfg.image_size), dtype=np.uint8)
    diameter = cce_mm = hp_mm = 0.0

    if has_polyp:
        shape_rng = rng.spawn("shape")
        for attempt in range(_MAX_REDRAWS):
            diameter = shape_rng.uniform(low=cfg.polyp_diameter_range_mm[0], high=cfg.polyp_diameter_range_mm[1])
            candidate = render_polyp_mask(cfg, shape_rng, diameter)
            if candidate is None:
                continue
            _, components = ndimage.label(candidate, structure=EIGHT_CONNECTED)
            if components == 1:
                mask = candidate
                break
        else:
            raise DatasetError(f"Could not place a valid polyp for sample {index} in {_MAX_REDRAWS} draws")
        image = render_polyp(cfg, rng.spawn("texture"), image, mask, neoplastic)
        measured = moment_major_mm(mask, cfg)
        cce_mm = diameter if measured is None else measured
        hp_mm = hp_size(cfg, rng.spawn("histopathology"), cce_mm)

    image = image + rng.spawn("noise").normal(image.shape, sigma=cfg.noise_sigma)
    image = quantize(np.clip(image, _FLOOR, 1.0))
    stamp_overlay(image, cfg.periphery_band_px)
    sample_id = f"s{index:05d}"
    return PhantomSample(
        id=sample_id,
        origin_id=sample_id,
        image=image,
        mask=mask,
        has_polyp=has_polyp,
        true_diameter_mm=diameter,
        cce_equivalent_mm=cce_mm,
        hp_mm=hp_mm,
        neoplastic=has_polyp and neoplastic,
    )


def generate_dataset(cfg: PhantomConfig, n_polyp: int, n_normal: int, seed: int) -> list[PhantomSample]:
    """
    `n_polyp` polyp frames (indices 0..n_polyp-1) followed by `n_normal`
    normal-mucosa frames. The first round(n_polyp * neoplastic_fraction) polyps
    are neoplastic.
    """
    if n_polyp < 0 or n_normal < 0:
        raise ValueError(f"Sample counts must be >= 0, got n_polyp={n_polyp}, n_normal={n_normal}")
    n_neoplastic = math.floor(n_polyp * cfg.neoplastic_fraction + 0.5)
    samples = [generate_sample(cfg, seed, i, True, i < n_neoplastic) for i in range(n_polyp)]
    samples += [generate_sample(cfg, seed, n_polyp + i, False, False) for i in range(n_normal)]
    logger.info(f"Generated {n_polyp} polyp and {n_normal} normal phantom frames (seed={seed})",
                extra={"n_polyp": n_polyp, "n_normal": n_normal, "seed": seed})
    return samples


def generate_pretext(cfg: PhantomConfig, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Texture-discrimination pretext task: class 0 is plain mucosa, class 1 is
    mucosa carrying one to three rectangular patches of polyp-like texture.
    Returns (images (n, 3, H, W), labels (n,)).
    """
    root = Rng(seed).spawn("pretext")
    size, band = cfg.image_size, cfg.periphery_band_px
    images, labels = [], []
    rows, cols = _grid(size)
    for i in range(n):
        rng = root.spawn(i)
        label = i % 2
        image = render_background(cfg, rng)
        if label:
            for _ in range(rng.integers(1, 4)):
                side = rng.integers(4, size // 3)
                r0 = rng.integers(band, size - band - side)
                c0 = rng.integers(band, size - band - side)
                patch = np.zeros((size, size), dtype=np.uint8)
                patch[r0:r0 + side, c0:c0 + side] = 1
                image = render_polyp(cfg, rng, image, patch, neoplastic=rng.bernoulli(0.5))
        image = image + rng.normal(image.shape, sigma=cfg.noise_sigma)
        image = quantize(np.clip(image, _FLOOR, 1.0))
        images.append(stamp_overlay(image, band))
        labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)
