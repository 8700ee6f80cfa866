"""
Leakage-free stratified train/val/test split.

Samples are grouped by origin_id so every augmented variant follows its
original; originals are stratified by has_polyp.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict

from app.errors import DatasetError
from app.models import Manifest, ManifestRecord, PhantomSample, Split
from app.nn.rng import Rng

logger = logging.getLogger(__name__)


def _allocate(sizes: dict[bool, int], fraction: float) -> dict[bool, int]:
    """
    Splits round(fraction * total) across classes by largest remainder, so the
    overall count is exact and each class is within one of its share.
    """
    total = sum(sizes.values())
    target = math.floor(fraction * total + 0.5)
    quotas = {k: fraction * n for k, n in sizes.items()}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    order = sorted(quotas, key=lambda k: (-(quotas[k] - alloc[k]), not k))
    for k in order[: target - sum(alloc.values())]:
        alloc[k] += 1
    return alloc


def image_path(sample_id: str) -> str:
    return f"images/{sample_id}.ppm"


def mask_path(sample_id: str) -> str:
    return f"masks/{sample_id}.pgm"


def split_dataset(samples: list[PhantomSample], test_fraction: float = 0.30, seed: int = 0,
                  val_fraction: float = 0.0) -> Manifest:
    """
    Tags each sample train/val/test. `test_fraction` is taken from all
    originals; `val_fraction` is then taken from the non-test originals.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if not samples:
        raise DatasetError("Cannot split an empty dataset")

    groups: dict[str, list[PhantomSample]] = defaultdict(list)
    for sample in samples:
        groups[sample.origin_id].append(sample)
    origins: dict[bool, list[str]] = defaultdict(list)
    for origin_id, members in groups.items():
        origins[members[0].has_polyp].append(origin_id)
    for has_polyp, ids in origins.items():
        if len(ids) < 2:
            label = "polyp" if has_polyp else "normal"
            raise DatasetError(f"Class '{label}' has {len(ids)} original(s); at least 2 are needed to split")

    rng = Rng(seed).spawn("split")
    shuffled = {k: [sorted(ids)[i] for i in rng.spawn(int(k)).permutation(len(ids))] for k, ids in origins.items()}
    n_test = _allocate({k: len(v) for k, v in shuffled.items()}, test_fraction)
    n_val = _allocate({k: len(v) - n_test[k] for k, v in shuffled.items()}, val_fraction)

    tag: dict[str, Split] = {}
    for k, ids in shuffled.items():
        for i, origin_id in enumerate(ids):
            if i < n_test[k]:
                tag[origin_id] = Split.TEST
            elif i < n_test[k] + n_val[k]:
                tag[origin_id] = Split.VAL
            else:
                tag[origin_id] = Split.TRAIN

    records = [
        ManifestRecord(
            id=s.id,
            origin_id=s.origin_id,
            image_path=image_path(s.id),
            mask_path=mask_path(s.id),
            has_polyp=s.has_polyp,
            neoplastic=s.neoplastic,
            true_mm=s.true_diameter_mm,
            cce_mm=s.cce_equivalent_mm,
            hp_mm=s.hp_mm,
            split=tag[s.origin_id],
            seed=seed,
        )
        for s in samples
    ]
    paths = [r.image_path for r in records]
    if len(set(paths)) != len(paths):
        raise DatasetError("Duplicate sample IDs in dataset")
    counts = {split.value: sum(r.split == split for r in records) for split in Split}
    logger.info(f"Split {len(records)} samples: {counts}", extra={"split_counts": counts, "seed": seed})
    return Manifest(seed=seed, records=records)
