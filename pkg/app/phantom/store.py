"""
Dataset persistence: PPM images, PGM masks and a JSON-lines manifest.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

from app.errors import DatasetError
from app.models import Manifest, ManifestRecord, PhantomSample
from app.phantom.netpbm import image_to_u8, mask_to_u8, read_netpbm, u8_to_image, u8_to_mask, write_pgm, write_ppm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


def write_dataset(directory: Path, samples: list[PhantomSample], manifest: Manifest) -> Path:
    """Writes every sample's image and mask plus the manifest; returns the manifest path."""
    directory = Path(directory)
    by_id = {s.id: s for s in samples}
    for record in manifest.records:
        sample = by_id[record.id]
        image_file, mask_file = directory / record.image_path, directory / record.mask_path
        image_file.parent.mkdir(parents=True, exist_ok=True)
        mask_file.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(image_file, image_to_u8(sample.image))
        write_pgm(mask_file, mask_to_u8(sample.mask))
    manifest_path = directory / MANIFEST_NAME
    write_manifest(manifest_path, manifest)
    logger.info(f"Wrote {len(manifest.records)} samples to {directory}")
    return manifest_path


def write_manifest(path: Path, manifest: Manifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in manifest.records:
            fh.write(record.model_dump_json() + "\n")


def read_manifest(path: Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Manifest not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.model_validate(json.loads(line)))
            except ValueError as e:
                raise DatasetError(f"{path}:{line_no}: invalid manifest record: {e}") from e
    seed = records[0].seed if records else 0
    return Manifest(seed=seed, records=records)


def load_sample(directory: Path, record: ManifestRecord) -> PhantomSample:
    directory = Path(directory)
    return PhantomSample(
        id=record.id,
        origin_id=record.origin_id,
        image=u8_to_image(read_netpbm(directory / record.image_path)),
        mask=u8_to_mask(read_netpbm(directory / record.mask_path)),
        has_polyp=record.has_polyp,
        true_diameter_mm=record.true_mm,
        cce_equivalent_mm=record.cce_mm,
        hp_mm=record.hp_mm,
        neoplastic=record.neoplastic,
    )


def read_dataset(directory: Path) -> tuple[Manifest, list[PhantomSample]]:
    directory = Path(directory)
    manifest = read_manifest(directory / MANIFEST_NAME)
    return manifest, [load_sample(directory, r) for r in manifest.records]
