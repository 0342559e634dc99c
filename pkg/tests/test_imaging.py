import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgaes.imaging import (
    Box,
    ImageBuf,
    ImageParseError,
    ImagingError,
    decode_image,
    encode_image,
    iou,
    resize_bilinear,
    ssim_rgb,
)


def solid(w, h, value):
    return ImageBuf(np.full((h, w, 3), value, dtype=np.float64))


def test_ppm_black_decode():
    payload = b"P6\n2 2\n255\n" + bytes(12)
    img = decode_image(payload)
    assert img.width == 2 and img.height == 2
    assert np.array_equal(img.pixels, np.zeros((2, 2, 3)))


def test_ppm_round_trip_canonical():
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    payload = b"P6\n7 5\n255\n" + arr.tobytes()
    assert encode_image(decode_image(payload)) == payload


def test_ppm_comments_and_whitespace():
    payload = b"P6 # comment\n# another\n 2\t1 \n255\n" + bytes(6)
    img = decode_image(payload)
    assert (img.width, img.height) == (2, 1)


def test_ppm_truncated_reports_offset():
    payload = b"P6\n4 4\n255\n" + bytes(10)
    with pytest.raises(ImageParseError) as exc:
        decode_image(payload)
    assert exc.value.offset == len(payload)


def test_truncated_png_is_parse_error():
    good = encode_image(solid(4, 4, 0.5), fmt="png")
    with pytest.raises(ImageParseError):
        decode_image(good[:20])


def test_png_round_trip_quantized():
    rng = np.random.default_rng(1)
    img = ImageBuf(rng.random((6, 4, 3)))
    back = decode_image(encode_image(img, fmt="png"))
    assert np.max(np.abs(back.pixels - img.pixels)) <= 0.5 / 255 + 1e-12


def test_unknown_format_rejected():
    with pytest.raises(ImageParseError):
        decode_image(b"GIF89a....")


def test_resize_constant_stays_constant():
    img = solid(5, 3, 0.37)
    out = resize_bilinear(img, 11, 7)
    assert np.allclose(out.pixels, 0.37, atol=1e-12)


def test_resize_monotone_row():
    img = ImageBuf(np.array([[[0.0] * 3, [1.0] * 3]]))
    out = resize_bilinear(img, 4, 1)
    row = out.pixels[0, :, 0]
    assert np.all(np.diff(row) >= 0)


def test_resize_checkerboard_halved():
    base = np.indices((8, 8)).sum(axis=0) % 2
    img = ImageBuf(np.repeat(base[:, :, None], 3, axis=2).astype(np.float64))
    out = resize_bilinear(img, 4, 4)
    assert np.max(np.abs(out.pixels - 0.5)) < 1e-9


def test_resize_zero_extent_rejected():
    with pytest.raises(ImagingError):
        resize_bilinear(solid(4, 4, 0.1), 0, 3)


def test_ssim_self_is_exactly_one():
    rng = np.random.default_rng(2)
    p = rng.random((32, 32, 3))
    assert ssim_rgb(p, p) == 1.0


def test_ssim_constant_patches_closed_form():
    a = np.full((32, 32, 3), 0.2)
    b = np.full((32, 32, 3), 0.8)
    expected = (2 * 0.2 * 0.8 + 0.01 ** 2) / (0.2 ** 2 + 0.8 ** 2 + 0.01 ** 2)
    assert ssim_rgb(a, b) == pytest.approx(expected, abs=1e-3)
    assert ssim_rgb(a, b) == pytest.approx(0.4707, abs=1e-3)


def test_ssim_inverted_high_variance_negative():
    rng = np.random.default_rng(3)
    p = np.clip(0.5 + 0.45 * rng.standard_normal((16, 16, 3)), 0.0, 1.0)
    assert ssim_rgb(p, 1.0 - p) < 0.0


def test_ssim_symmetry_and_shape_check():
    rng = np.random.default_rng(4)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert abs(ssim_rgb(a, b) - ssim_rgb(b, a)) < 1e-12
    with pytest.raises(ImagingError):
        ssim_rgb(a, rng.random((8, 9, 3)))


def test_iou_examples():
    b = Box(0, 0, 2, 2)
    assert iou(b, b) == 1.0
    assert iou(b, Box(5, 5, 7, 7)) == 0.0
    assert iou(b, Box(1, 0, 3, 2)) == pytest.approx(2 / 6, abs=1e-9)


def test_box_degenerate_rejected():
    with pytest.raises(ImagingError):
        Box(0, 0, 0, 1)


@given(
    st.tuples(*[st.floats(0, 10) for _ in range(4)]).filter(lambda t: t[0] < t[2] and t[1] < t[3]),
    st.tuples(*[st.floats(0, 10) for _ in range(4)]).filter(lambda t: t[0] < t[2] and t[1] < t[3]),
)
@settings(max_examples=80, deadline=None)
def test_iou_symmetric_bounded(t1, t2):
    a = Box(*t1)
    b = Box(*t2)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    if (a.x0, a.y0, a.x1, a.y1) == (b.x0, b.y0, b.x1, b.y1):
        assert v == 1.0


@given(st.integers(1, 6), st.integers(1, 6), st.integers(42, 46))
@settings(max_examples=40, deadline=None)
def test_resize_preserves_range(w, h, seed):
    rng = np.random.default_rng(seed)
    img = ImageBuf(rng.random((h + 1, w + 1, 3)))
    out = resize_bilinear(img, w, h)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_pixel_range_validated():
    with pytest.raises(ImagingError):
        ImageBuf(np.full((2, 2, 3), 1.5))
