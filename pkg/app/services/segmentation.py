"""
Polyp segmentation with AID-U-Net(D, S): a U-Net of direct depth D whose skip
connections each pass through a sub-U-Net of depth S before concatenation.
Also the verdict taxonomy for judging one predicted mask against its truth.
"""
from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from app.errors import DatasetError, MultiRoiError
from app.models import Region, SegmentationResult, Verdict
from app.nn.layers import LayerKind
from app.nn.network import INPUT, LayerSpec, LossKind, NetworkSpec, Node, Params, conv, forward, init_params, simple, up
from app.nn.rng import Rng
from app.nn.train import TrainConfig, TrainingResult, fit
from app.phantom.generator import EIGHT_CONNECTED

logger = logging.getLogger(__name__)

MIN_REGION_PX = 5
WRONG_REGION_IOU = 0.2


class AidUNetSpec(BaseModel):
    direct_depth: int = Field(2, ge=1, description="Levels on the direct contracting/expansive path")
    sub_depth: int = Field(2, ge=0, description="Depth of the sub-U-Net on each skip connection; 0 means identity skips")
    base_channels: int = Field(8, ge=1)
    convs_per_block: int = Field(2, ge=1)


class _Graph:
    """Collects nodes in definition order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, name: str, layer: LayerSpec, *inputs: str) -> str:
        self.nodes.append(Node(name=name, layer=layer, inputs=tuple(inputs)))
        return name


def _block(g: _Graph, prefix: str, src: str, cin: int, cout: int, convs: int) -> str:
    for i in range(convs):
        src = g.add(f"{prefix}.conv{i}", conv(cin if i == 0 else cout, cout), src)
        src = g.add(f"{prefix}.relu{i}", simple(LayerKind.RELU), src)
    return src


SkipRoute = Callable[[_Graph, int, str, int], str]


def _identity_skip(g: _Graph, level: int, src: str, channels: int) -> str:
    return src


def _u_body(g: _Graph, prefix: str, src: str, cin: int, base: int, depth: int, convs: int,
            route_skip: SkipRoute = _identity_skip) -> str:
    """
    Encoder/decoder of `depth` levels; returns the decoder output node, which
    has `base` channels at the input resolution.
    """
    skips = []
    channels = cin
    for level in range(depth):
        width = base * 2 ** level
        src = _block(g, f"{prefix}enc{level}", src, channels, width, convs)
        skips.append((src, width))
        src = g.add(f"{prefix}pool{level}", simple(LayerKind.MAXPOOL), src)
        channels = width
    width = base * 2 ** depth
    src = _block(g, f"{prefix}bottleneck", src, channels, width, convs)
    channels = width
    for level in reversed(range(depth)):
        skip, width = skips[level]
        skip = route_skip(g, level, skip, width)
        src = g.add(f"{prefix}up{level}", up(channels, width), src)
        src = g.add(f"{prefix}cat{level}", simple(LayerKind.CONCAT), src, skip)
        src = _block(g, f"{prefix}dec{level}", src, 2 * width, width, convs)
        channels = width
    return src


def _head(g: _Graph, src: str, channels: int) -> str:
    src = g.add("head.conv", conv(channels, 1, kernel_size=1), src)
    return g.add("head.sigmoid", simple(LayerKind.SIGMOID), src)


def _check_divisible(image_size: int, levels: int) -> None:
    if image_size % (2 ** levels):
        raise ValueError(f"Input size {image_size} is not divisible by 2^{levels}")


def build_u_net(depth: int, base_channels: int = 8, image_size: int = 64, in_channels: int = 3,
                convs_per_block: int = 2) -> NetworkSpec:
    """Plain U-Net with a 1-channel sigmoid output."""
    _check_divisible(image_size, depth)
    g = _Graph()
    out = _u_body(g, "", INPUT, in_channels, base_channels, depth, convs_per_block)
    _head(g, out, base_channels)
    return NetworkSpec(input_shape=(in_channels, image_size, image_size), nodes=tuple(g.nodes),
                       output="head.sigmoid", loss=LossKind.BCE)


def build_aid_u_net(spec: AidUNetSpec, image_size: int = 64, in_channels: int = 3) -> NetworkSpec:
    """
    AID-U-Net(D, S). Each skip tensor at level l feeds a sub-U-Net of depth S
    (base width equal to the skip's channel count) whose output replaces the
    skip in the concatenation. With S = 0 this is exactly `build_u_net`.
    """
    _check_divisible(image_size, spec.direct_depth + spec.sub_depth)

    def route_skip(g: _Graph, level: int, src: str, channels: int) -> str:
        if spec.sub_depth == 0:
            return src
        return _u_body(g, f"sub{level}.", src, channels, channels, spec.sub_depth, spec.convs_per_block)

    g = _Graph()
    out = _u_body(g, "", INPUT, in_channels, spec.base_channels, spec.direct_depth, spec.convs_per_block, route_skip)
    _head(g, out, spec.base_channels)
    return NetworkSpec(input_shape=(in_channels, image_size, image_size), nodes=tuple(g.nodes),
                       output="head.sigmoid", loss=LossKind.BCE)


def train_segmenter(net: NetworkSpec, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
                    val: Optional[tuple[np.ndarray, np.ndarray]] = None) -> TrainingResult:
    if len(images) == 0:
        raise DatasetError("train_segmenter needs at least one image/mask pair")
    targets = np.asarray(masks, dtype=np.float64)[:, None, :, :]
    if val is not None:
        val = (val[0], np.asarray(val[1], dtype=np.float64)[:, None, :, :])
    params = init_params(net, Rng(cfg.seed).spawn("init"))
    return fit(net, params, (images, targets), cfg, val=val)


def label_regions(mask: np.ndarray, min_region_px: int = MIN_REGION_PX) -> SegmentationResult:
    """8-connected components of a binary mask, dropping those under `min_region_px`."""
    labels, count = ndimage.label(mask > 0, structure=EIGHT_CONNECTED)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1)) if count else []
    keep = [i + 1 for i, size in enumerate(sizes) if size >= min_region_px]
    relabeled = np.zeros_like(labels, dtype=np.int32)
    for new, old in enumerate(keep, start=1):
        relabeled[labels == old] = new
    regions = []
    for new, box in enumerate(ndimage.find_objects(relabeled), start=1):
        if box is None:
            continue
        regions.append(Region(
            label=new,
            pixel_count=int(np.sum(relabeled == new)),
            bbox=(box[0].start, box[1].start, box[0].stop - 1, box[1].stop - 1),
        ))
    return SegmentationResult(mask=(relabeled > 0).astype(np.uint8), labels=relabeled, regions=regions)


def segment(net: NetworkSpec, params: Params, image: np.ndarray, threshold: float = 0.5,
            min_region_px: int = MIN_REGION_PX) -> SegmentationResult:
    probs, _ = forward(net, params, np.asarray(image)[None])
    return label_regions(probs[0, 0] >= threshold, min_region_px)


def iou(predicted: np.ndarray, truth: np.ndarray) -> float:
    p, t = np.asarray(predicted) > 0, np.asarray(truth) > 0
    if p.shape != t.shape:
        raise ValueError(f"Mask shapes differ: {p.shape} vs {t.shape}")
    union = np.sum(p | t)
    return 1.0 if union == 0 else float(np.sum(p & t) / union)


def dice(predicted: np.ndarray, truth: np.ndarray) -> float:
    p, t = np.asarray(predicted) > 0, np.asarray(truth) > 0
    if p.shape != t.shape:
        raise ValueError(f"Mask shapes differ: {p.shape} vs {t.shape}")
    total = np.sum(p) + np.sum(t)
    return 1.0 if total == 0 else float(2 * np.sum(p & t) / total)


def judge(regions: Sequence[np.ndarray], truth: np.ndarray, wrong_region_iou: float = WRONG_REGION_IOU) -> Verdict:
    """
    First matching rule wins: no predicted regions while a polyp is present is
    missed_roi; no region reaching `wrong_region_iou` is wrong_region; two or
    more regions touching the polyp is split_roi; otherwise correct.
    """
    truth = np.asarray(truth) > 0
    _, rois = ndimage.label(truth, structure=EIGHT_CONNECTED)
    if rois > 1:
        raise MultiRoiError(f"Ground-truth mask holds {rois} regions; exactly 0 or 1 is supported")
    if not regions:
        return Verdict.MISSED_ROI if rois else Verdict.CORRECT
    if max(iou(r, truth) for r in regions) < wrong_region_iou:
        return Verdict.WRONG_REGION
    if sum(bool(np.any(np.asarray(r, dtype=bool) & truth)) for r in regions) >= 2:
        return Verdict.SPLIT_ROI
    return Verdict.CORRECT


def merge_regions(regions: Sequence[np.ndarray]) -> list[np.ndarray]:
    """All regions as a single ROI (empty list stays empty)."""
    if not regions:
        return []
    return [np.logical_or.reduce([np.asarray(r, dtype=bool) for r in regions])]


def judge_merged(regions: Sequence[np.ndarray], truth: np.ndarray,
                 wrong_region_iou: float = WRONG_REGION_IOU) -> Verdict:
    """`judge` after treating the union of all regions as one ROI."""
    return judge(merge_regions(regions), truth, wrong_region_iou)


def merged_size_rule(regions: Sequence[Region]) -> int:
    """Total pixel area of all regions."""
    return sum(r.pixel_count for r in regions)
