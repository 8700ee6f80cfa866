"""
Agent that characterizes a flagged frame as neoplastic or not.
"""
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

from .base import Agent
from app.models import PhantomSample
from app.nn.network import NetworkSpec, Params
from app.services.characterization import characterize


class CharacterizationAgent(Agent):
    """
    Labels the polyp from the classifier output and dumps the Gram spectra of
    the selected layers as JSON lines next to the report.
    """

    stage = "characterization"

    def __init__(self, net: NetworkSpec, params: Params, layers: Sequence[str],
                 spectrum_dir: Optional[Path] = None, mask_restricted: bool = False):
        self.net = net
        self.params = params
        self.layers = list(layers)
        self.spectrum_dir = spectrum_dir
        self.mask_restricted = mask_restricted
        self.logger = logging.getLogger(self.__class__.__name__)

    def run(self, sample: PhantomSample) -> dict[str, Any]:
        mask = sample.mask if self.mask_restricted and sample.has_polyp else None
        neoplastic, confidence, spectrum = characterize(
            self.net, self.params, sample.image, self.layers, mask=mask, with_spectrum=self.spectrum_dir is not None
        )
        fields: dict[str, Any] = {"neoplastic": neoplastic, "neoplastic_confidence": confidence}
        if spectrum is not None:
            path = self.spectrum_dir / f"{sample.id}.jsonl"
            label = "neoplastic" if neoplastic else "non-neoplastic"
            with path.open("w", encoding="utf-8") as fh:
                for entry in spectrum.layers:
                    fh.write(json.dumps({
                        "id": sample.id,
                        "layer": entry.layer,
                        "eigenvalues": [float(f"{v:.6g}") for v in entry.eigenvalues],
                        "largest": float(f"{entry.largest:.6g}"),
                        "class": label,
                    }) + "\n")
            fields["spectrum_path"] = str(path)
        return fields
