import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdistill import augment
from maskdistill.augment import (CropRecord, PatchMask, apply_mean_fill,
                                 crops_overlap, generate_mask, make_views,
                                 photometric, sample_crop)
from maskdistill.config import load_config
from maskdistill.errors import ShapeError


def test_full_scale_square_gives_full_crop(rng):
    # at scale 1 only aspect 1 fits, so the fallback yields the full image
    crop = sample_crop(rng, (128, 128), 1.0, 1.0, out_size=64)
    assert crop.left == 0 and crop.top == 0
    assert crop.width == 128 and crop.height == 128


def test_area_floor_respected():
    rng = np.random.default_rng(42)
    orig = (200, 200)
    min_area = 0.5 * orig[0] * orig[1]
    for _ in range(10_000):
        crop = sample_crop(rng, orig, 0.5, 1.0, out_size=64)
        assert crop.width * crop.height >= min_area - 1e-9
        assert 0 <= crop.left and crop.left + crop.width <= orig[1]
        assert 0 <= crop.top and crop.top + crop.height <= orig[0]


def test_sample_crop_deterministic():
    a = sample_crop(np.random.default_rng(9), (100, 100), 0.5, 1.0, 32)
    b = sample_crop(np.random.default_rng(9), (100, 100), 0.5, 1.0, 32)
    assert a == b


def test_generate_mask_counts(rng):
    mask = generate_mask(14, 14, 0.6, rng)
    assert mask.count == 118  # round(0.6 * 196)
    mask = generate_mask(7, 7, 0.6, rng)
    assert mask.count == 29  # round(0.6 * 49)


def test_generate_mask_tiny_ratio(rng):
    mask = generate_mask(7, 7, 0.005, rng)
    assert mask.count == round(0.005 * 49) == 0


def test_generate_mask_seeds_differ():
    a = generate_mask(8, 8, 0.5, np.random.default_rng(1))
    b = generate_mask(8, 8, 0.5, np.random.default_rng(2))
    assert a.count == b.count == 32
    assert not np.array_equal(a.grid, b.grid)


@given(st.integers(2, 10), st.integers(2, 10),
       st.floats(0.05, 0.95), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_mask_count_formula(gh, gw, ratio, seed):
    mask = generate_mask(gh, gw, ratio, np.random.default_rng(seed))
    assert mask.count == round(ratio * gh * gw)


def test_mean_fill_constant_identity():
    img = np.full((16, 16, 3), 0.7)
    mask = PatchMask(grid=np.array([[False, True], [True, False]]),
                     ratio=0.5, patch_size=8)
    out = apply_mean_fill(img, mask)
    assert np.allclose(out, img)


def test_mean_fill_two_patch_value():
    # left patch all 0, right patch all 1; masking the right fills with 0.5
    img = np.zeros((8, 16, 1))
    img[:, 8:] = 1.0
    mask = PatchMask(grid=np.array([[False, True]]), ratio=0.5, patch_size=8)
    out = apply_mean_fill(img, mask)
    assert np.allclose(out[:, 8:], 0.5)
    assert np.allclose(out[:, :8], 0.0)


def test_mean_fill_empty_mask_identity(rng):
    img = rng.random((16, 16, 3))
    mask = PatchMask(grid=np.zeros((2, 2), dtype=bool), ratio=0.0, patch_size=8)
    assert np.array_equal(apply_mean_fill(img, mask), img)


def test_mean_fill_fixed_points(rng):
    img = rng.random((16, 16, 3))
    mask = PatchMask(grid=np.array([[True, False], [False, True]]),
                     ratio=0.5, patch_size=8)
    once = apply_mean_fill(img, mask)
    # masked pixels carry the whole-view per-channel mean exactly
    masked = augment.pixel_mask_array(mask, 16)
    mean = img.reshape(-1, 3).mean(axis=0)
    assert np.allclose(once[masked], np.broadcast_to(mean, once[masked].shape),
                       atol=1e-12)
    # unmasked pixels are untouched by any number of applications
    twice = apply_mean_fill(once, mask)
    assert np.array_equal(once[~masked], twice[~masked])
    # constant images are exact fixed points
    flat = np.full((16, 16, 3), 0.3)
    assert np.allclose(apply_mean_fill(flat, mask), flat, atol=1e-12)
    # a view whose masked pixels already equal its mean is a fixed point
    stable = img.copy()
    stable[masked] = stable.reshape(-1, 3).mean(axis=0)
    # iterate to the fixed point: fills converge geometrically
    prev = stable
    for _ in range(60):
        nxt = apply_mean_fill(prev, mask)
        prev = nxt
    assert np.allclose(apply_mean_fill(prev, mask), prev, atol=1e-9)


def test_mean_fill_shape_error(rng):
    img = rng.random((15, 16, 3))
    mask = PatchMask(grid=np.zeros((2, 2), dtype=bool), ratio=0.0, patch_size=8)
    with pytest.raises(ShapeError):
        apply_mean_fill(img, mask)


def test_photometric_strength_zero_is_identity(rng):
    img = rng.random((32, 32, 3))
    assert photometric(img, 0.0, rng) is img


def _small_cfg(**overrides):
    base = dict(image_size=32, patch_size=8, backbone_channels="8 16",
                stem_stride=4, queue_size=64, batch_size=8,
                num_prototypes=16, proto_dim=8, global_dim=8,
                global_hidden=16, local_hidden=16, num_matched_pairs=4)
    base.update(overrides)
    return load_config(overrides=base)


def test_make_views_overlap_always_nonempty(rng):
    cfg = _small_cfg(scale_min=0.5)
    img = rng.random((96, 96, 3))
    for _ in range(200):
        pair = make_views(img, cfg, rng)
        assert crops_overlap(pair.student_view.crop, pair.teacher_view.crop)


def test_make_views_mask_count(rng):
    cfg = _small_cfg(mask_ratio=0.6)
    pair = make_views(rng.random((64, 64, 3)), cfg, rng)
    # 32/8 grid = 4x4 = 16 patches, round(0.6*16) = 10
    assert pair.student_view.mask.count == 10


def test_make_views_plain_teacher_without_photometric(rng):
    cfg = _small_cfg(photometric_strength=0.0)
    img = rng.random((64, 64, 3))
    pair = make_views(img, cfg, rng)
    expected = augment.apply_crop(img, pair.teacher_view.crop)
    assert np.array_equal(pair.teacher_view.image, expected)


def test_make_views_deterministic(rng):
    cfg = _small_cfg()
    img = np.random.default_rng(1).random((64, 64, 3))
    a = make_views(img, cfg, np.random.default_rng(4))
    b = make_views(img, cfg, np.random.default_rng(4))
    assert a.student_view.crop == b.student_view.crop
    assert a.teacher_view.crop == b.teacher_view.crop
    assert np.array_equal(a.student_view.image, b.student_view.image)
    assert np.array_equal(a.teacher_view.image, b.teacher_view.image)


def test_make_views_masked_pixel_fraction(rng):
    cfg = _small_cfg(mask_ratio=0.5)
    img = rng.random((64, 64, 3))
    pair = make_views(img, cfg, rng)
    pm = augment.pixel_mask_array(pair.student_view.mask, cfg.image_size)
    assert pm.mean() == pair.student_view.mask.count / 16


def test_zero_replace_strategy(rng):
    cfg = _small_cfg(mask_strategy="zero_replace")
    pair = make_views(rng.random((64, 64, 3)), cfg, rng)
    pm = augment.pixel_mask_array(pair.student_view.mask, cfg.image_size)
    assert np.all(pair.student_view.image[pm] == 0.0)
