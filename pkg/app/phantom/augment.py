"""
Geometric augmentation: random reflections, scaling, translation and rotation,
applied identically to image and mask with the frame size unchanged.
"""
from __future__ import annotations

import logging
import math

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from app.models import PhantomSample
from app.nn.rng import Rng
from app.phantom.generator import EIGHT_CONNECTED, PhantomConfig, moment_major_mm, quantize, stamp_overlay

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 10


class AugmentConfig(BaseModel):
    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_fraction: float = Field(0.10, ge=0, lt=0.5, description="Max shift per axis as a fraction of the side")
    rotation_deg: tuple[float, float] = (0.0, 360.0)


class AugmentParams(BaseModel):
    """One concrete draw of the transform."""
    hflip: bool = False
    vflip: bool = False
    scale: float = Field(1.0, gt=0)
    translate: tuple[float, float] = Field((0.0, 0.0), description="(rows, cols) shift in pixels")
    rotation: float = Field(0.0, description="Radians, counter-clockwise in (row, col) coordinates")

    @property
    def reflection_only(self) -> "AugmentParams":
        return AugmentParams(hflip=self.hflip, vflip=self.vflip)


def draw_params(rng: Rng, size: int, ranges: AugmentConfig) -> AugmentParams:
    shift = ranges.translate_fraction * size
    return AugmentParams(
        hflip=rng.bernoulli(0.5),
        vflip=rng.bernoulli(0.5),
        scale=rng.uniform(low=ranges.scale_range[0], high=ranges.scale_range[1]),
        translate=(rng.uniform(low=-shift, high=shift), rng.uniform(low=-shift, high=shift)),
        rotation=math.radians(rng.uniform(low=ranges.rotation_deg[0], high=ranges.rotation_deg[1])),
    )


def reflect(array: np.ndarray, hflip: bool, vflip: bool) -> np.ndarray:
    """Flips the last two axes; exact, so applying the same flip twice restores the input."""
    if hflip:
        array = np.flip(array, axis=-1)
    if vflip:
        array = np.flip(array, axis=-2)
    return np.ascontiguousarray(array)


def _inverse_map(params: AugmentParams, size: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Output pixel o samples input pixel i = c + R(theta)^T (o - c - t) / s, the
    inverse of o = c + t + s R(theta) (i - c) about the frame centre c.
    """
    c = np.full(2, (size - 1) / 2.0)
    cos, sin = math.cos(params.rotation), math.sin(params.rotation)
    rotation = np.array([[cos, -sin], [sin, cos]])
    matrix = rotation.T / params.scale
    offset = c - matrix @ (c + np.asarray(params.translate))
    return matrix, offset


def _fill_band(image: np.ndarray, band: int) -> np.ndarray:
    """Replaces the overlay band by the edge-extended interior so it does not bleed in."""
    if band == 0:
        return image
    interior = image[:, band:-band, band:-band]
    return np.pad(interior, ((0, 0), (band, band), (band, band)), mode="edge")


def warp(image: np.ndarray, mask: np.ndarray, params: AugmentParams, band: int) -> tuple[np.ndarray, np.ndarray]:
    """Applies `params` to an image (3, H, W) and its mask (H, W)."""
    image = reflect(image, params.hflip, params.vflip)
    mask = reflect(mask, params.hflip, params.vflip)
    size = image.shape[-1]
    matrix, offset = _inverse_map(params, size)

    source = _fill_band(image, band)
    warped = np.stack([
        ndimage.affine_transform(channel, matrix, offset=offset, order=1, mode="nearest")
        for channel in source
    ])
    warped = quantize(np.clip(warped, 0.0, 1.0))
    stamp_overlay(warped, band)

    warped_mask = ndimage.affine_transform(mask.astype(np.float64), matrix, offset=offset, order=0,
                                           mode="constant", cval=0.0)
    warped_mask = (warped_mask > 0.5).astype(np.uint8)
    if band > 0:
        warped_mask[:band, :] = warped_mask[-band:, :] = 0
        warped_mask[:, :band] = warped_mask[:, -band:] = 0
    return warped, warped_mask


def _usable(mask: np.ndarray) -> bool:
    _, components = ndimage.label(mask, structure=EIGHT_CONNECTED)
    return components == 1


def apply_augmentation(sample: PhantomSample, params: AugmentParams, cfg: PhantomConfig,
                       sample_id: str | None = None) -> PhantomSample:
    image, mask = warp(sample.image, sample.mask, params, cfg.periphery_band_px)
    cce_mm = sample.cce_equivalent_mm
    if sample.has_polyp:
        measured = moment_major_mm(mask, cfg)
        cce_mm = sample.true_diameter_mm if measured is None else measured
    return sample.model_copy(update={
        "id": sample_id or sample.id,
        "image": image,
        "mask": mask,
        "cce_equivalent_mm": cce_mm,
    })


def augment(sample: PhantomSample, ops_seed: int, cfg: PhantomConfig | None = None,
            ranges: AugmentConfig | None = None, sample_id: str | None = None) -> PhantomSample:
    """
    Randomly transformed copy of `sample`. Draws that push the polyp out of the
    frame or break it apart are re-drawn; after the last failed attempt only the
    reflections are applied.
    """
    cfg = cfg or PhantomConfig()
    ranges = ranges or AugmentConfig()
    rng = Rng(ops_seed)
    params = None
    for attempt in range(MAX_ATTEMPTS):
        params = draw_params(rng, sample.image.shape[-1], ranges)
        candidate = apply_augmentation(sample, params, cfg, sample_id)
        if not sample.has_polyp or _usable(candidate.mask):
            return candidate
    logger.debug(f"Sample {sample.id}: no usable draw in {MAX_ATTEMPTS} attempts, reflecting only")
    return apply_augmentation(sample, params.reflection_only, cfg, sample_id)


def augment_dataset(samples: list[PhantomSample], factor: int, seed: int, cfg: PhantomConfig | None = None,
                    ranges: AugmentConfig | None = None) -> list[PhantomSample]:
    """
    Each original followed by `factor - 1` augmented variants `<id>-a<j>`
    sharing its origin_id.
    """
    if factor < 1:
        raise ValueError(f"Augmentation factor must be >= 1, got {factor}")
    root = Rng(seed).spawn("augment")
    out: list[PhantomSample] = []
    for sample in samples:
        out.append(sample)
        for j in range(1, factor):
            ops_seed = root.spawn(f"{sample.id}-a{j}").next_u64()
            out.append(augment(sample, ops_seed, cfg, ranges, sample_id=f"{sample.id}-a{j}"))
    logger.info(f"Augmented {len(samples)} samples x{factor} -> {len(out)}")
    return out
