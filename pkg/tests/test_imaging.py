import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from tashr.errors import ImageNotFoundError, ShapeMismatchError, UnsupportedImageError, DataError
from tashr.imaging import (TextAnnotation, extract_mask, load_image, load_mask, mask_iou,
                           quantize8, save_image, SampleTriplet)


def _write(path, arr, mode):
    Image.fromarray(arr, mode).save(path)
    return path


def test_load_black_and_white(tmp_path):
    black = _write(tmp_path / "b.png", np.zeros((8, 8, 3), np.uint8), "RGB")
    white = _write(tmp_path / "w.png", np.full((8, 8, 3), 255, np.uint8), "RGB")
    assert np.all(load_image(black) == 0.0)
    assert np.all(load_image(white) == 1.0)


def test_load_scales_by_255(tmp_path):
    p = _write(tmp_path / "g.png", np.full((4, 4, 3), 128, np.uint8), "RGB")
    img = load_image(p)
    assert img.dtype == np.float32
    np.testing.assert_allclose(img, 128 / 255, rtol=0, atol=1e-7)
    assert abs(float(img[0, 0, 0]) - 0.50196) < 1e-5


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(ImageNotFoundError):
        load_image(tmp_path / "missing.png")
    rgba = _write(tmp_path / "a.png", np.zeros((4, 4, 4), np.uint8), "RGBA")
    with pytest.raises(UnsupportedImageError):
        load_image(rgba)
    gray16 = tmp_path / "g16.png"
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(gray16)
    with pytest.raises(UnsupportedImageError):
        load_image(gray16)
    assert ImageNotFoundError is not UnsupportedImageError


def test_quantize_round_half_up():
    assert quantize8(0.5) == 128
    assert quantize8(0.0) == 0 and quantize8(1.0) == 255
    assert quantize8(127.5 / 255 - 1e-6) == 127


def test_save_mask_all_ones(tmp_path):
    p = tmp_path / "m.png"
    save_image(np.ones((5, 7), np.float32), p)
    with Image.open(p) as im:
        assert im.mode == "L"
        assert np.all(np.asarray(im) == 255)
    assert np.all(load_mask(p) == 1.0)


def test_save_half_is_128(tmp_path):
    p = tmp_path / "h.png"
    save_image(np.full((2, 2, 3), 0.5), p)
    with Image.open(p) as im:
        assert np.all(np.asarray(im) == 128)


def test_save_unwritable(tmp_path):
    with pytest.raises(DataError):
        save_image(np.zeros((2, 2, 3)), tmp_path / "nope" / "x.png")


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3))))
def test_roundtrip_bit_exact(tmp_path_factory, payload):
    d = tmp_path_factory.mktemp("rt")
    src = _write(d / "src.png", payload, "RGB")
    save_image(load_image(src), d / "dst.png")
    with Image.open(d / "dst.png") as im:
        assert np.array_equal(np.asarray(im), payload)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 5, 3), elements=st.floats(0, 1)))
def test_save_load_equals_quantize(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("q") / "x.png"
    save_image(img, p)
    assert np.array_equal(quantize8(load_image(p)), quantize8(img))


def test_extract_identical_pair_is_empty():
    rng = np.random.default_rng(0)
    x = rng.random((32, 32, 3)).astype(np.float32)
    assert extract_mask(x, x, 0.1, 0.5).sum() == 0


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float32)


def test_extract_recovers_disk():
    rng = np.random.default_rng(1)
    clean = (0.2 + 0.5 * rng.random((64, 64, 3))).astype(np.float32)
    disk = _disk(64, 64, 30, 33, 12)
    highlight = np.clip(clean + 0.3 * disk[..., None], 0, 1)
    mask = extract_mask(highlight, clean, t_diff=0.1, t_bright=0.0)
    assert mask_iou(mask, disk) >= 0.99


def test_extract_below_threshold_is_empty():
    rng = np.random.default_rng(2)
    clean = (0.5 * rng.random((32, 32, 3))).astype(np.float32)
    assert extract_mask(clean + 0.05, clean, t_diff=0.1, t_bright=0.0).sum() == 0


def test_extract_brightness_gate_and_small_components():
    clean = np.full((40, 40, 3), 0.2, np.float32)
    h = clean.copy()
    h[5:15, 5:15] += 0.3   # diff passes but 0.5 < 170/255
    h[20:35, 20:35] += 0.6  # bright, 225 px
    h[2:5, 30:33] += 0.6   # bright but only 9 px
    m = extract_mask(h, clean)
    assert m[5:15, 5:15].sum() == 0
    assert m[20:35, 20:35].all()
    assert m[2:5, 30:33].sum() == 0
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_extract_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        extract_mask(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (16, 16, 3), elements=st.floats(0, 1, width=32)),
       arrays(np.float32, (16, 16, 3), elements=st.floats(0, 1, width=32)))
def test_extract_never_marks_equal_pixels(h, c):
    same = np.all(h == c, axis=2)
    c = np.where(same[..., None], h, c)
    m = extract_mask(h, c, 0.05, 0.0, min_area=1)
    assert not np.any(m[same])


def test_annotation_validation():
    with pytest.raises(DataError):
        TextAnnotation([(0, 0, 5, 5)], [])
    ann = TextAnnotation([(0, 0, 5, 5)], ["x"])
    ann.validate(5, 5)
    with pytest.raises(DataError):
        ann.validate(4, 5)


def test_triplet_shapes_checked():
    with pytest.raises(ShapeMismatchError):
        SampleTriplet("a", np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), np.zeros((8, 9)))
