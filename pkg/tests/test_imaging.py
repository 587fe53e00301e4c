import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noduleseg.imaging import (
    MalformedHeaderError,
    Nodule,
    PhantomSpec,
    TruncatedDataError,
    UnsupportedFormatError,
    gamma_correct,
    generate_phantom,
    intensity_window,
    load_pgm,
    load_ppm,
    median_filter,
    overlay_mask,
    save_pgm,
    save_ppm,
)
from oracles import median_by_sort

unit_images = arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(1, 12)),
    elements=st.floats(0.0, 1.0, allow_nan=False),
)


# -- PGM / PPM ---------------------------------------------------------------

def test_load_pgm_normalizes_by_maxval(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_pgm(path)
    np.testing.assert_array_equal(img, [[0.0, 1.0], [128 / 255, 64 / 255]])


def test_load_pgm_sixteen_bit_big_endian(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5 2 1 65535\n" + bytes([0xFF, 0xFF, 0x01, 0x00]))
    np.testing.assert_array_equal(load_pgm(path), [[1.0, 256 / 65535]])


def test_load_pgm_tolerates_comment(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n# made by hand\n1 1\n255\n\x80")
    assert load_pgm(path)[0, 0] == 128 / 255


def test_load_pgm_error_cases_are_distinct(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pgm(tmp_path / "missing.pgm")
    ascii_pgm = tmp_path / "ascii.pgm"
    ascii_pgm.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(UnsupportedFormatError, match="unsupported format"):
        load_pgm(ascii_pgm)
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n2 x\n255\n")
    with pytest.raises(MalformedHeaderError):
        load_pgm(bad)
    short = tmp_path / "short.pgm"
    short.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(TruncatedDataError):
        load_pgm(short)


@pytest.mark.parametrize("value,expected", [(0.0, 0), (1.0, 255), (0.5, 128)])
def test_save_pgm_rounding(tmp_path, value, expected):
    path = tmp_path / "px.pgm"
    save_pgm(np.array([[value]]), path, bit_depth=8)
    assert path.read_bytes() == b"P5\n1 1\n255\n" + bytes([expected])


@pytest.mark.parametrize("depth", [8, 16])
def test_pgm_round_trip_within_half_step(tmp_path, depth):
    rng = np.random.default_rng(depth)
    maxval = 2 ** depth - 1
    for i in range(50):
        img = rng.random((int(rng.integers(1, 20)), int(rng.integers(1, 20))))
        path = tmp_path / f"r{i}.pgm"
        save_pgm(img, path, bit_depth=depth)
        back = load_pgm(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 1 / (2 * maxval) + 1e-15


def test_save_pgm_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_pgm(np.zeros((2, 2)), tmp_path / "nope" / "x.pgm")


def test_ppm_round_trip(tmp_path):
    rgb = np.zeros((2, 3, 3))
    rgb[0, 1] = (1.0, 0.0, 1.0)
    save_ppm(rgb, tmp_path / "o.ppm")
    np.testing.assert_array_equal(load_ppm(tmp_path / "o.ppm"), rgb)


# -- phantoms ------------------------------------------------------------------

def test_phantom_radius_zero_is_single_pixel():
    spec = PhantomSpec(9, 9, (Nodule(4, 4, 0, 0.9),))
    _, mask = generate_phantom(spec, seed=0)
    assert mask.sum() == 1 and mask[4, 4] == 1


def test_phantom_disk_area_matches_pixel_count():
    spec = PhantomSpec(64, 64, (Nodule(31, 30, 10, 0.8),))
    img, mask = generate_phantom(spec, seed=0)
    oracle = sum(1 for y in range(64) for x in range(64) if (x - 31) ** 2 + (y - 30) ** 2 <= 100)
    assert mask.sum() == oracle
    assert abs(mask.sum() - math.pi * 100) <= 0.05 * math.pi * 100
    assert np.all(img[mask == 1] == 0.8)
    assert np.all(img[mask == 0] == spec.background_intensity)


def test_phantom_is_deterministic_and_noise_leaves_mask_alone():
    spec = PhantomSpec(32, 32, (Nodule(10, 12, 5, 0.7),), 0.2, 0.1, 0.05)
    a = generate_phantom(spec, seed=3)
    b = generate_phantom(spec, seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    clean = generate_phantom(PhantomSpec(32, 32, spec.nodules, 0.2), seed=3)
    np.testing.assert_array_equal(a[1], clean[1])
    assert a[0].min() >= 0 and a[0].max() <= 1


def test_phantom_spec_json_field_names(tmp_path):
    spec = PhantomSpec(16, 8, (Nodule(3, 4, 2, 0.6),), 0.1, 0.02, 0.01)
    doc = spec.to_dict()
    assert set(doc) == {"width", "height", "nodules", "background-intensity",
                        "gaussian-noise-sigma", "salt-pepper-fraction"}
    assert set(doc["nodules"][0]) == {"center-x", "center-y", "radius", "intensity"}
    assert PhantomSpec.from_dict(doc) == spec


@pytest.mark.parametrize("bad", [
    dict(nodules=(Nodule(3, 3, -1, 0.5),)),
    dict(nodules=(Nodule(30, 3, 1, 0.5),)),
    dict(salt_pepper_fraction=1.5),
])
def test_phantom_spec_invariants(bad):
    with pytest.raises(ValueError):
        PhantomSpec(10, 10, **bad)


# -- median filter -------------------------------------------------------------

def test_median_constant_image_is_fixed():
    img = np.full((5, 7), 0.3)
    np.testing.assert_array_equal(median_filter(img, 1), img)
    np.testing.assert_array_equal(median_filter(median_filter(img, 2), 2), img)


def test_median_center_pixel_hand_example():
    img = np.array([[1, 2, 3], [4, 100, 6], [7, 8, 9]]) / 100
    assert median_filter(img, 1)[1, 1] == 6 / 100


def test_median_removes_single_salt_pixel():
    img = np.full((7, 7), 0.5)
    img[3, 3] = 1.0
    assert np.all(median_filter(img, 1)[1:-1, 1:-1] == 0.5)


@pytest.mark.parametrize("radius", [1, 2])
def test_median_matches_sort_oracle(radius):
    rng = np.random.default_rng(radius)
    for _ in range(20):
        img = rng.random((int(rng.integers(1, 16)), int(rng.integers(1, 16))))
        np.testing.assert_array_equal(median_filter(img, radius), median_by_sort(img, radius))


def test_median_rejects_radius_zero():
    with pytest.raises(ValueError):
        median_filter(np.zeros((3, 3)), 0)


# -- intensity transforms --------------------------------------------------------

def test_window_identity_and_clamp():
    x = np.linspace(0, 1, 11).reshape(1, -1)
    np.testing.assert_allclose(intensity_window(x, 0.5, 1.0), x, atol=1e-15)
    assert intensity_window(np.array([[0.35]]), 0.5, 0.2)[0, 0] == 0.0
    for width in (0.1, 0.5, 1.0):
        assert intensity_window(np.array([[0.4]]), 0.4, width)[0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        intensity_window(x, 0.5, 0.0)


def test_gamma_examples():
    x = np.array([[0.0, 0.25, 1.0]])
    np.testing.assert_array_equal(gamma_correct(x, 1.0), x)
    assert gamma_correct(x, 0.5)[0, 1] == 0.5
    for g in (0.3, 2.0, 7.0):
        out = gamma_correct(x, g)
        assert out[0, 0] == 0.0 and out[0, 2] == 1.0
    with pytest.raises(ValueError):
        gamma_correct(x, 0.0)


@settings(max_examples=60, deadline=None)
@given(img=unit_images, level=st.floats(0, 1), width=st.floats(0.01, 1),
       gamma=st.floats(0.05, 5), radius=st.integers(1, 2))
def test_transforms_preserve_unit_range(img, level, width, gamma, radius):
    for out in (median_filter(img, radius), intensity_window(img, level, width),
                gamma_correct(img, gamma)):
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


@given(a=st.floats(0, 1), b=st.floats(0, 1), level=st.floats(0, 1), width=st.floats(0.01, 1))
def test_window_is_monotone(a, b, level, width):
    lo, hi = sorted((a, b))
    out = intensity_window(np.array([[lo, hi]]), level, width)
    assert out[0, 0] <= out[0, 1]


# -- overlay ----------------------------------------------------------------------

def test_overlay_examples():
    img = np.random.default_rng(0).random((4, 5))
    empty = overlay_mask(img, np.zeros((4, 5), np.uint8))
    assert np.all(empty[..., 0] == empty[..., 1]) and np.all(empty[..., 1] == empty[..., 2])
    full = overlay_mask(img, np.ones((4, 5), np.uint8))
    assert np.all(full[..., 0] == 1.0)
    one = np.zeros((4, 5), np.uint8)
    one[2, 3] = 1
    tinted = overlay_mask(img, one)
    assert np.count_nonzero(np.any(tinted != empty, axis=2)) == 1
    assert tinted[2, 3, 0] == 1.0
    with pytest.raises(ValueError):
        overlay_mask(img, np.zeros((3, 5), np.uint8))
