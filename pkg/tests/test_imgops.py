"""Image-op tests. Each derived expectation is computed by an independent
oracle in this file (index remaps, CDF formulas, analytic filter responses)."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cervifuse import imgops
from cervifuse.errors import InvalidParameterError


# ---------------------------------------------------------------- oracles

def global_he_oracle(gray: np.ndarray) -> np.ndarray:
    """Plain global histogram equalization from the normalized-CDF formula."""
    hist = np.bincount(gray.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cmin = int(cdf[np.flatnonzero(hist)[0]])
    total = gray.size
    if total == cmin:
        return gray.copy()
    lut = np.clip(np.rint(255.0 * (cdf - cmin) / (total - cmin)), 0, 255).astype(np.uint8)
    return lut[gray]


def rot90_cw_oracle(img: np.ndarray) -> np.ndarray:
    """Exact 90-degree clockwise remap of a square image.

    Rotating (dx, dy) -> (-dy, dx) about the center of an n x n grid sends
    source (col y, row n-1-x) to destination (x, y)."""
    n = img.shape[0]
    out = np.empty_like(img)
    for y in range(n):
        for x in range(n):
            out[y, x] = img[n - 1 - x, y]
    return out


def _ramp(h=16, w=16, channels=3):
    base = (np.add.outer(np.arange(h), np.arange(w)) * 255 // (h + w - 2)).astype(np.uint8)
    if channels == 1:
        return base
    return np.stack([base, base[::-1], base[:, ::-1]], axis=-1)


def _noise(h=16, w=16, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


# ----------------------------------------------------------------- affine

def test_affine_identity_is_bit_identical():
    img = _noise(12, 9)
    out = imgops.affine(img)
    assert out.dtype == np.uint8
    assert np.array_equal(out, img)


def test_affine_90deg_matches_index_permutation_oracle():
    img = _noise(4, 4, channels=1, seed=3)
    assert len(np.unique(img)) > 10  # asymmetric pattern, no accidental symmetry
    assert np.array_equal(imgops.affine(img, rot_deg=90), rot90_cw_oracle(img))


def test_affine_90deg_rgb():
    img = _noise(8, 8, seed=5)
    assert np.array_equal(imgops.affine(img, rot_deg=90), rot90_cw_oracle(img))


def test_affine_flips():
    img = _noise(7, 5)
    assert np.array_equal(imgops.affine(img, flip_h=True), img[:, ::-1])
    assert np.array_equal(imgops.affine(img, flip_v=True), img[::-1, :])


def test_affine_integer_translation_replicates_edges():
    img = _noise(6, 6, channels=1)
    out = imgops.affine(img, tx=2.0)
    assert np.array_equal(out[:, 2:], img[:, :-2])
    assert np.array_equal(out[:, 0], img[:, 0])
    assert np.array_equal(out[:, 1], img[:, 0])


def test_affine_rotation_round_trip_interior():
    img = _ramp(32, 32, channels=1)
    back = imgops.affine(imgops.affine(img, rot_deg=30), rot_deg=-30)
    inner = (slice(10, 22), slice(10, 22))
    diff = back[inner].astype(int) - img[inner].astype(int)
    assert np.max(np.abs(diff)) <= 2


def test_affine_scale_on_constant_image_is_constant():
    img = np.full((10, 10, 3), 77, dtype=np.uint8)
    assert np.array_equal(imgops.affine(img, scale=1.7), img)
    assert np.array_equal(imgops.affine(img, scale=0.5), img)


def test_affine_zero_scale_rejected():
    with pytest.raises(InvalidParameterError):
        imgops.affine(_noise(4, 4), scale=0.0)


def test_affine_preserves_shape():
    img = _noise(11, 17)
    out = imgops.affine(img, rot_deg=13, scale=1.1, tx=1.5, ty=-2.0, shear_deg=5)
    assert out.shape == img.shape and out.dtype == np.uint8


# ----------------------------------------------------------------- resize

def test_resize_same_size_identity():
    img = _noise(9, 9)
    assert np.array_equal(imgops.resize_bilinear(img, 9, 9), img)


def test_resize_constant_stays_constant():
    img = np.full((64, 64, 3), 123, dtype=np.uint8)
    out = imgops.resize_bilinear(img, 32, 32)
    assert out.shape == (32, 32, 3)
    assert np.all(out == 123)


def test_resize_ramp_stays_monotone():
    img = np.tile(np.arange(0, 240, 10, dtype=np.uint8), (4, 1))
    out = imgops.resize_bilinear(img, 4, 12)
    assert np.all(np.diff(out.astype(int), axis=1) >= 0)


# ------------------------------------------------------------------ clahe

def test_clahe_single_tile_unbounded_equals_global_he():
    for seed in range(3):
        img = _noise(40, 40, channels=1, seed=seed)
        got = imgops.clahe(img, tile_grid=(1, 1), clip_limit=300.0)
        want = global_he_oracle(img)
        assert np.max(np.abs(got.astype(int) - want.astype(int))) <= 1


def test_clahe_constant_image_stays_constant():
    img = np.full((32, 32), 90, dtype=np.uint8)
    for clip in (2.0, 400.0):
        out = imgops.clahe(img, tile_grid=(8, 8), clip_limit=clip)
        assert len(np.unique(out)) == 1
    # unclipped single-bin histogram keeps the exact value
    assert np.all(imgops.clahe(img, tile_grid=(1, 1), clip_limit=400.0) == 90)


def test_clahe_constant_rgb_stays_constant():
    img = np.full((32, 32, 3), 0, dtype=np.uint8)
    img[..., 0] = 60
    img[..., 1] = 120
    img[..., 2] = 30
    out = imgops.clahe(img, clip_limit=400.0)
    for c in range(3):
        assert len(np.unique(out[..., c])) == 1


def test_clahe_stretches_low_contrast():
    rng = np.random.default_rng(1)
    img = rng.integers(100, 140, size=(64, 64), dtype=np.uint8)
    out = imgops.clahe(img, tile_grid=(4, 4), clip_limit=4.0)
    assert out.std() > img.std()


def test_clahe_validates_parameters():
    img = _noise(16, 16)
    with pytest.raises(InvalidParameterError):
        imgops.clahe(img, tile_grid=(0, 8))
    with pytest.raises(InvalidParameterError):
        imgops.clahe(img, clip_limit=0.0)
    with pytest.raises(InvalidParameterError):
        imgops.clahe(_noise(4, 4), tile_grid=(8, 8))


@given(arrays(np.uint8, st.tuples(st.integers(8, 24), st.integers(8, 24))))
def test_clahe_range_and_shape_contract(img):
    out = imgops.clahe(img, tile_grid=(2, 2), clip_limit=3.0)
    assert out.shape == img.shape and out.dtype == np.uint8


def test_all_channel_clahe_acts_per_channel():
    img = _noise(32, 32, seed=9)
    out = imgops.all_channel_clahe(img, tile_grid=(2, 2), clip_limit=300.0)
    for c in range(3):
        want = imgops.clahe(img[..., c], tile_grid=(2, 2), clip_limit=300.0)
        assert np.array_equal(out[..., c], want)


# ------------------------------------------------------------------ edges

def test_edge_detect_black_input_stays_black():
    img = np.zeros((10, 10, 3), dtype=np.uint8)
    assert np.all(imgops.edge_detect(img, alpha=1.0) == 0)


def test_edge_detect_vertical_step_oracle():
    # step 0 -> 200 between columns 3 and 4; Sobel row sums to 4, so the
    # normalized response is exactly 200 on the two step columns, 0 elsewhere
    img = np.zeros((8, 8), dtype=np.uint8)
    img[:, 4:] = 200
    out = imgops.edge_detect(img, alpha=1.0)
    want = np.zeros((8, 8), dtype=np.uint8)
    want[:, 3:5] = 200
    assert np.array_equal(out, want)


def test_edge_detect_alpha_zero_is_identity():
    img = _noise(9, 9)
    assert np.array_equal(imgops.edge_detect(img, 0.0), img)
    assert np.array_equal(imgops.directed_edge_detect(img, 0.0, 45.0), img)


def test_edge_detect_alpha_out_of_range():
    with pytest.raises(InvalidParameterError):
        imgops.edge_detect(_noise(4, 4), alpha=1.5)
    with pytest.raises(InvalidParameterError):
        imgops.directed_edge_detect(_noise(4, 4), alpha=-0.1, angle_deg=0)


def test_directed_edge_detect_selects_orientation():
    img = np.zeros((12, 12), dtype=np.uint8)
    img[:, 6:] = 255  # vertical edge: strong gx, zero gy
    along_x = imgops.directed_edge_detect(img, 1.0, angle_deg=0.0)
    along_y = imgops.directed_edge_detect(img, 1.0, angle_deg=90.0)
    assert along_x[:, 5:7].min() == 255
    assert np.all(along_y == 0)


# ------------------------------------------------------------------ canny

def test_canny_constant_image_empty():
    img = np.full((16, 16), 128, dtype=np.uint8)
    assert np.all(imgops.canny(img, 50, 150) == 0)


def test_canny_white_square_contour():
    img = np.zeros((20, 20), dtype=np.uint8)
    img[5:15, 5:15] = 255
    out = imgops.canny(img, 50, 150)
    ys, xs = np.nonzero(out)
    assert len(ys) > 0
    # every edge pixel sits in the band within 1 pixel of the square boundary
    inside = (ys >= 4) & (ys <= 15) & (xs >= 4) & (xs <= 15)
    on_border = (np.minimum(np.abs(ys - 5), np.abs(ys - 14)) <= 1) | (
        np.minimum(np.abs(xs - 5), np.abs(xs - 14)) <= 1)
    assert np.all(inside & on_border)
    # the contour is closed: all four sides are represented
    assert np.any(ys <= 6) and np.any(ys >= 13)
    assert np.any(xs <= 6) and np.any(xs >= 13)
    # interior stays empty
    assert np.all(out[8:12, 8:12] == 0)


def test_canny_raising_low_threshold_never_adds_edges():
    img = _noise(32, 32, channels=1, seed=7)
    lo = imgops.canny(img, 20, 150)
    hi = imgops.canny(img, 60, 150)
    assert np.all(lo[hi == 255] == 255)


def test_canny_threshold_ordering_enforced():
    with pytest.raises(InvalidParameterError):
        imgops.canny(_noise(8, 8), 150, 150)
    with pytest.raises(InvalidParameterError):
        imgops.canny(_noise(8, 8), -1, 150)


def test_canny_rgb_output_shape():
    out = imgops.canny(_noise(16, 16, seed=2), 50, 150)
    assert out.shape == (16, 16, 3)
    assert set(np.unique(out)) <= {0, 255}


# ------------------------------------------------------------ photometric

def test_channel_shuffle_identity_perm_unchanged():
    img = _noise(8, 8)
    assert np.array_equal(imgops.channel_shuffle(img, (0, 1, 2)), img)


def test_channel_shuffle_moves_channels():
    img = _noise(8, 8)
    out = imgops.channel_shuffle(img, (1, 2, 0))
    assert np.array_equal(out[..., 0], img[..., 1])
    assert np.array_equal(out[..., 1], img[..., 2])
    assert np.array_equal(out[..., 2], img[..., 0])


def test_channel_shuffle_grayscale_warns_noop():
    img = _noise(8, 8, channels=1)
    with pytest.warns(UserWarning):
        out = imgops.channel_shuffle(img, (2, 1, 0))
    assert np.array_equal(out, img)


def test_channel_shuffle_rejects_non_permutation():
    with pytest.raises(InvalidParameterError):
        imgops.channel_shuffle(_noise(4, 4), (0, 0, 1))


def test_grayscale_of_gray_rgb_is_identity():
    gray = _noise(8, 8, channels=1)
    img = np.repeat(gray[..., None], 3, axis=2)
    assert np.array_equal(imgops.to_grayscale(img), img)


def test_grayscale_channels_equal():
    out = imgops.to_grayscale(_noise(8, 8))
    assert np.array_equal(out[..., 0], out[..., 1])
    assert np.array_equal(out[..., 1], out[..., 2])


def test_hue_saturation_zero_shift_near_identity():
    img = _noise(16, 16, seed=4)
    out = imgops.hue_saturation(img, 0.0, 0.0)
    assert np.max(np.abs(out.astype(int) - img.astype(int))) <= 1


def test_hue_rotation_cycles_primaries():
    red = np.zeros((2, 2, 3), dtype=np.uint8)
    red[..., 0] = 255
    green = imgops.hue_saturation(red, 120.0, 0.0)
    assert np.all(green[..., 1] == 255)
    assert np.all(green[..., 0] == 0) and np.all(green[..., 2] == 0)


def test_color_quantize_palette_bound():
    img = _noise(32, 32, seed=6)
    out = imgops.color_quantize(img, 16)
    distinct = len(np.unique(out.reshape(-1, 3), axis=0))
    assert distinct <= 16
    gray = _noise(32, 32, channels=1, seed=6)
    assert len(np.unique(imgops.color_quantize(gray, 16))) <= 16


def test_contrast_brightness_identity_exact():
    img = _noise(10, 10)
    assert np.array_equal(imgops.contrast_brightness(img, 1.0, 0.0), img)


def test_contrast_brightness_spreads_about_midgray():
    img = np.array([[100, 150]], dtype=np.uint8)
    out = imgops.contrast_brightness(img, 2.0, 0.0)
    assert out[0, 0] == 72  # 2*(100-127.5)+127.5 = 72.5, ties round to even
    assert out[0, 1] == 172  # 2*(150-127.5)+127.5 = 172.5 -> 172


def test_brightness_multiply():
    img = np.array([[100, 200]], dtype=np.uint8)
    assert np.array_equal(imgops.brightness_multiply(img, 1.0), img)
    out = imgops.brightness_multiply(img, 0.5)
    assert list(out[0]) == [50, 100]
    assert np.all(imgops.brightness_multiply(img, 2.0)[0] == [200, 255])


def test_channel_shift_clips():
    img = np.full((4, 4, 3), 250, dtype=np.uint8)
    out = imgops.channel_shift(img, (10.0, -255.0, 0.0))
    assert np.all(out[..., 0] == 255)
    assert np.all(out[..., 1] == 0)
    assert np.all(out[..., 2] == 250)


def test_gamma_contrast():
    img = np.array([[0, 128, 255]], dtype=np.uint8)
    assert np.array_equal(imgops.gamma_contrast(img, 1.0), img)
    out = imgops.gamma_contrast(img, 0.5)
    assert out[0, 0] == 0 and out[0, 2] == 255
    assert out[0, 1] == round(255 * (128 / 255) ** 0.5)
    with pytest.raises(InvalidParameterError):
        imgops.gamma_contrast(img, 0.0)


# ----------------------------------------------------- global contracts

ALL_OPS = [
    lambda im: imgops.affine(im, rot_deg=17, scale=1.1),
    lambda im: imgops.clahe(im, tile_grid=(2, 2)),
    lambda im: imgops.all_channel_clahe(im, tile_grid=(2, 2)),
    lambda im: imgops.gamma_contrast(im, 1.4),
    lambda im: imgops.edge_detect(im, 0.6),
    lambda im: imgops.directed_edge_detect(im, 0.6, 30.0),
    lambda im: imgops.canny(im, 50, 150),
    lambda im: imgops.to_grayscale(im),
    lambda im: imgops.hue_saturation(im, 30.0, 0.1),
    lambda im: imgops.color_quantize(im),
    lambda im: imgops.contrast_brightness(im, 1.2, 10.0),
    lambda im: imgops.brightness_multiply(im, 0.8),
    lambda im: imgops.channel_shift(im, (5.0, -5.0, 0.0)),
]


@pytest.mark.parametrize("op", ALL_OPS)
def test_ops_preserve_shape_and_dtype(op):
    rgb = _noise(16, 16, seed=8)
    out = op(rgb)
    assert out.shape == rgb.shape
    assert out.dtype == np.uint8


def test_ops_reject_empty_and_wrong_dtype():
    with pytest.raises(InvalidParameterError):
        imgops.affine(np.zeros((0, 4), dtype=np.uint8))
    with pytest.raises(InvalidParameterError):
        imgops.affine(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(InvalidParameterError):
        imgops.affine(np.zeros((4, 4, 4), dtype=np.uint8))
