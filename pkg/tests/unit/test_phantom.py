import math

import numpy as np
import pytest
from scipy import ndimage

from app.errors import DatasetError, NetpbmFormatError
from app.models import PhantomSample, Split
from app.phantom.augment import AugmentParams, apply_augmentation, augment, augment_dataset, reflect
from app.phantom import generator
from app.phantom.generator import (
    EIGHT_CONNECTED,
    PhantomConfig,
    generate_dataset,
    generate_pretext,
    generate_sample,
)
from app.phantom.netpbm import decode_netpbm, encode_pgm, encode_ppm
from app.phantom.split import split_dataset
from app.phantom.store import MANIFEST_NAME, read_dataset, write_dataset

SMALL = PhantomConfig(image_size=32)


def _sample(sample_id, has_polyp, origin_id=None, size=16):
    mask = np.zeros((size, size), dtype=np.uint8)
    if has_polyp:
        mask[6:10, 6:10] = 1
    return PhantomSample(
        id=sample_id,
        origin_id=origin_id or sample_id,
        image=np.full((3, size, size), 0.5),
        mask=mask,
        has_polyp=has_polyp,
        true_diameter_mm=5.0 if has_polyp else 0.0,
        cce_equivalent_mm=5.0 if has_polyp else 0.0,
        hp_mm=4.0 if has_polyp else 0.0,
        neoplastic=False,
    )


def _originals(n_polyp, n_normal):
    return ([_sample(f"p{i}", True) for i in range(n_polyp)]
            + [_sample(f"n{i}", False) for i in range(n_normal)])


# --- netpbm ------------------------------------------------------------------

def test_one_pixel_white_pgm_bytes():
    data = encode_pgm(np.array([[255]], dtype=np.uint8))
    assert data == b"P5\n1 1\n255\n\xff"
    assert decode_netpbm(data).tolist() == [[255]]


def test_ppm_round_trip_is_bit_exact():
    rgb = (np.arange(2 * 3 * 3) * 13 % 256).astype(np.uint8).reshape(2, 3, 3)
    assert np.array_equal(decode_netpbm(encode_ppm(rgb)), rgb)


def test_reader_accepts_comments_and_extra_whitespace():
    data = b"P5 # written by hand\n 2\t1\n# maxval next\n255\n\x01\x02"
    assert decode_netpbm(data).tolist() == [[1, 2]]


@pytest.mark.parametrize(
    "data, offset",
    [
        (b"P3\n1 1\n255\n\xff", 0),      # ASCII variants are not supported
        (b"P5\n2 2\n255\n\xff", 12),     # raster one byte of four
        (b"P5\n1 x\n255\n\xff", 5),      # non-numeric height
        (b"P5\n1 1\n65535\n\xff\xff", 12),
    ],
)
def test_malformed_netpbm_reports_the_offset(data, offset):
    with pytest.raises(NetpbmFormatError) as exc:
        decode_netpbm(data)
    assert exc.value.offset == offset


# --- generator ---------------------------------------------------------------

def test_generate_dataset_counts_and_ids():
    samples = generate_dataset(SMALL, n_polyp=6, n_normal=4, seed=1)
    assert [s.id for s in samples] == [f"s{i:05d}" for i in range(10)]
    assert sum(s.has_polyp for s in samples) == 6
    assert sum(s.neoplastic for s in samples) == round(6 * SMALL.neoplastic_fraction)
    assert all(s.image.shape == (3, 32, 32) and s.mask.shape == (32, 32) for s in samples)


def test_generation_is_byte_identical_for_the_same_seed():
    a = generate_sample(SMALL, seed=3, index=2, has_polyp=True, neoplastic=True)
    b = generate_sample(SMALL, seed=3, index=2, has_polyp=True, neoplastic=True)
    c = generate_sample(SMALL, seed=4, index=2, has_polyp=True, neoplastic=True)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.hp_mm == b.hp_mm
    assert a.image.tobytes() != c.image.tobytes()


def test_normal_frames_only():
    samples = generate_dataset(SMALL, n_polyp=0, n_normal=5, seed=0)
    assert len(samples) == 5
    assert not any(np.any(s.mask) for s in samples)
    assert all(s.cce_equivalent_mm == 0.0 and s.hp_mm == 0.0 for s in samples)


def test_negative_counts_are_rejected():
    with pytest.raises(ValueError):
        generate_dataset(SMALL, n_polyp=-1, n_normal=3, seed=0)


def test_polyp_masks_are_single_components_clear_of_the_band():
    band = SMALL.periphery_band_px
    for s in generate_dataset(SMALL, n_polyp=12, n_normal=0, seed=5):
        _, count = ndimage.label(s.mask, structure=EIGHT_CONNECTED)
        assert count == 1
        assert not s.mask[:band].any() and not s.mask[-band:].any()
        assert not s.mask[:, :band].any() and not s.mask[:, -band:].any()
        assert np.all(s.image[:, :band, :] == 0.0)


def test_unplaceable_polyp_is_a_dataset_error(monkeypatch):
    monkeypatch.setattr(generator, "render_polyp_mask", lambda *args, **kwargs: None)
    with pytest.raises(DatasetError):
        generate_sample(SMALL, seed=0, index=3, has_polyp=True, neoplastic=False)


def test_images_are_quantized_to_eight_bits():
    s = generate_sample(SMALL, seed=0, index=0, has_polyp=True, neoplastic=False)
    assert np.array_equal(np.rint(s.image * 255) / 255, s.image)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_histopathology_sizes_follow_the_shrinkage_model():
    """Over many polyps the HP size regresses on the CCE size with slope near alpha."""
    cfg = PhantomConfig()
    samples = generate_dataset(cfg, n_polyp=200, n_normal=0, seed=11)
    cce = np.array([s.cce_equivalent_mm for s in samples])
    hp = np.array([s.hp_mm for s in samples])
    slope = np.polyfit(cce, hp, 1)[0]
    assert abs(slope - cfg.hp_bias_alpha) < 0.05
    assert np.all(hp >= 0.5)
    true = np.array([s.true_diameter_mm for s in samples])
    assert abs(cce.mean() - true.mean()) / true.mean() < 0.10


def test_pretext_task_alternates_labels():
    images, labels = generate_pretext(SMALL, n=6, seed=2)
    assert images.shape == (6, 3, 32, 32)
    assert labels.tolist() == [0, 1, 0, 1, 0, 1]


# --- augmentation ------------------------------------------------------------

@pytest.mark.parametrize("hflip, vflip", [(True, False), (False, True), (True, True)])
def test_reflections_are_involutions(hflip, vflip):
    x = np.arange(2 * 4 * 5, dtype=np.float64).reshape(2, 4, 5)
    assert np.array_equal(reflect(reflect(x, hflip, vflip), hflip, vflip), x)


def test_quarter_turn_moves_the_mask_as_expected():
    cfg = PhantomConfig()
    size, c = cfg.image_size, (cfg.image_size - 1) / 2
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[20:26, 36:44] = 1
    sample = _sample("x", True, size=size).model_copy(update={"mask": mask})

    rotated = apply_augmentation(sample, AugmentParams(rotation=math.pi / 2), cfg)

    expected = np.zeros_like(mask)
    for r, col in zip(*np.nonzero(mask)):
        expected[int(round(c - (col - c))), int(round(c + (r - c)))] = 1
    assert np.array_equal(rotated.mask, expected)
    assert rotated.image.shape == sample.image.shape


def test_augment_preserves_shape_label_and_connectivity():
    sample = generate_sample(PhantomConfig(), seed=2, index=0, has_polyp=True, neoplastic=True)
    out = augment(sample, ops_seed=99, sample_id="s00000-a1")
    assert out.image.shape == sample.image.shape and out.mask.shape == sample.mask.shape
    assert out.id == "s00000-a1" and out.origin_id == sample.id
    assert out.neoplastic and out.has_polyp
    _, count = ndimage.label(out.mask, structure=EIGHT_CONNECTED)
    assert count == 1
    assert augment(sample, ops_seed=99).image.tobytes() == out.image.tobytes()


@pytest.mark.parametrize("has_polyp", [True, False])
def test_augment_keeps_shape_and_label_over_many_draws(has_polyp):
    cfg = PhantomConfig()
    sample = generate_sample(cfg, seed=4, index=1, has_polyp=has_polyp, neoplastic=has_polyp)
    for ops_seed in range(1000):
        out = augment(sample, ops_seed=ops_seed, cfg=cfg)
        assert out.image.shape == sample.image.shape and out.mask.shape == sample.mask.shape
        assert out.has_polyp == has_polyp == bool(out.mask.any())
        assert out.neoplastic == sample.neoplastic
        _, count = ndimage.label(out.mask, structure=EIGHT_CONNECTED)
        assert count == (1 if has_polyp else 0)


def test_augment_dataset_appends_variants_after_each_original():
    originals = generate_dataset(SMALL, n_polyp=2, n_normal=1, seed=0)
    out = augment_dataset(originals, factor=4, seed=0, cfg=SMALL)
    assert len(out) == 12
    assert [s.id for s in out[:4]] == ["s00000", "s00000-a1", "s00000-a2", "s00000-a3"]
    assert {s.origin_id for s in out[:4]} == {"s00000"}
    assert all(a is b for a, b in zip(augment_dataset(originals, factor=1, seed=0), originals))
    with pytest.raises(ValueError):
        augment_dataset(originals, factor=0, seed=0)


# --- split -------------------------------------------------------------------

def test_thirty_percent_of_ten_is_three():
    manifest = split_dataset(_originals(5, 5), test_fraction=0.30, seed=0)
    test = manifest.by_split(Split.TEST)
    assert len(test) == 3
    assert sorted(r.has_polyp for r in test) == [False, True, True]


def test_validation_share_comes_from_the_non_test_originals():
    manifest = split_dataset(_originals(10, 10), test_fraction=0.30, seed=0, val_fraction=0.15)
    assert len(manifest.ids(Split.TEST)) == 6
    assert len(manifest.ids(Split.VAL)) == 2
    assert len(manifest.ids(Split.TRAIN)) == 12


def test_augmented_variants_follow_their_original():
    originals = _originals(4, 4)
    augmented = originals + [_sample(f"{s.id}-a1", s.has_polyp, origin_id=s.id) for s in originals]
    manifest = split_dataset(augmented, test_fraction=0.30, seed=3)
    split_of = {}
    for record in manifest.records:
        assert split_of.setdefault(record.origin_id, record.split) == record.split


def test_split_is_deterministic():
    a = split_dataset(_originals(6, 6), seed=8)
    b = split_dataset(_originals(6, 6), seed=8)
    assert a == b


@pytest.mark.parametrize(
    "samples",
    [
        [],                   # nothing to split
        _originals(1, 5),     # only one polyp original
        _originals(3, 3) + [_sample("p0", True, origin_id="dup")],
    ],
)
def test_unsplittable_datasets_are_rejected(samples):
    with pytest.raises(DatasetError):
        split_dataset(samples)


# --- persistence -------------------------------------------------------------

def test_dataset_round_trips_through_the_store(tmp_path):
    samples = generate_dataset(SMALL, n_polyp=3, n_normal=3, seed=4)
    manifest = split_dataset(samples, seed=4)
    write_dataset(tmp_path, samples, manifest)

    assert len((tmp_path / MANIFEST_NAME).read_text().splitlines()) == 6
    loaded_manifest, loaded = read_dataset(tmp_path)
    assert loaded_manifest == manifest
    for original, copy in zip(samples, loaded):
        assert copy.id == original.id
        assert np.array_equal(copy.image, original.image)
        assert np.array_equal(copy.mask, original.mask)
        assert copy.hp_mm == original.hp_mm


def test_missing_manifest_is_a_dataset_error(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)
