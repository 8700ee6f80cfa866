"""
Agent that segments a flagged frame and estimates the polyp's size.
"""
import logging
from pathlib import Path
from typing import Any, Optional

from .base import Agent
from app.errors import GeometryError
from app.models import PhantomSample
from app.nn.network import NetworkSpec, Params
from app.phantom.netpbm import image_to_u8, mask_to_u8, write_pgm, write_ppm
from app.services.segmentation import judge, merge_regions, segment
from app.services.sizing import SizeRegressor, bucket, estimate_cce_mm, render_overlay


class SizingAgent(Agent):
    """
    Segments the frame, merges all predicted regions into one ROI, fits an
    ellipse on the cropped mask and maps the CCE size to a histopathology size.
    """

    stage = "sizing"

    def __init__(self, net: NetworkSpec, params: Params, regressor: SizeRegressor, band_px: int, fov_mm: float,
                 threshold: float = 0.5, min_region_px: int = 5, wrong_region_iou: float = 0.2,
                 overlay_dir: Optional[Path] = None, mask_dir: Optional[Path] = None):
        self.net = net
        self.params = params
        self.regressor = regressor
        self.band_px = band_px
        self.fov_mm = fov_mm
        self.threshold = threshold
        self.min_region_px = min_region_px
        self.wrong_region_iou = wrong_region_iou
        self.overlay_dir = overlay_dir
        self.mask_dir = mask_dir
        self.logger = logging.getLogger(self.__class__.__name__)

    def run(self, sample: PhantomSample) -> dict[str, Any]:
        result = segment(self.net, self.params, sample.image, self.threshold, self.min_region_px)
        regions = result.region_masks()
        fields: dict[str, Any] = {
            "region_count": len(result.regions),
            "segmentation_verdict": judge(regions, sample.mask, self.wrong_region_iou),
        }
        if self.mask_dir is not None:
            write_pgm(self.mask_dir / f"{sample.id}.pgm", mask_to_u8(result.mask))
        merged = merge_regions(regions)
        if not merged:
            self.logger.info(f"{sample.id}: no region segmented, size not estimated", extra={"image_id": sample.id})
            return fields
        try:
            cce_mm, fit = estimate_cce_mm(merged[0], self.band_px, self.fov_mm)
        except GeometryError as e:
            self.logger.warning(f"{sample.id}: {e}", extra={"image_id": sample.id})
            return fields
        hp_mm = max(0.0, float(self.regressor.predict(cce_mm)[0]))
        fields.update(cce_mm=cce_mm, hp_mm_predicted=hp_mm, size_bucket=bucket(hp_mm))
        if self.overlay_dir is not None:
            path = self.overlay_dir / f"{sample.id}.ppm"
            overlay = render_overlay(image_to_u8(sample.image), fit, offset=(self.band_px, self.band_px))
            write_ppm(path, overlay)
            fields["overlay_path"] = str(path)
        return fields
