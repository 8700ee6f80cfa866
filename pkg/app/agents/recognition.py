"""
Agent that recognizes polyps and writes a saliency map for each frame.
"""
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .base import Agent
from app.models import PhantomSample, RecognitionLabel
from app.nn.network import NetworkSpec, Params
from app.phantom.netpbm import write_pgm
from app.services.recognition import classify, saliency_map


class RecognitionAgent(Agent):
    """
    Classifies a frame as C-Polyp or No-C-Polyp. The recognition label gates
    the sizing and characterization branches.
    """

    stage = "recognition"

    def __init__(self, net: NetworkSpec, params: Params, saliency_dir: Optional[Path] = None,
                 tie_break_positive: bool = False):
        self.net = net
        self.params = params
        self.saliency_dir = saliency_dir
        self.tie_break_positive = tie_break_positive
        self.logger = logging.getLogger(self.__class__.__name__)

    def run(self, sample: PhantomSample) -> tuple[RecognitionLabel, float, Optional[str]]:
        label, confidence = classify(self.net, self.params, sample.image, self.tie_break_positive)
        self.logger.debug(f"{sample.id}: {label.value} ({confidence:.3f})", extra={"image_id": sample.id})
        saliency_path = None
        if self.saliency_dir is not None:
            heat = saliency_map(self.net, self.params, sample.image, label.index)
            path = self.saliency_dir / f"{sample.id}.pgm"
            write_pgm(path, np.rint(heat * 255.0).astype(np.uint8))
            saliency_path = str(path)
        return label, confidence, saliency_path
