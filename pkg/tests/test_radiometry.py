import io

import numpy as np
import pytest
from PIL import Image

from relightkit import radiometry as rio


def test_rgbe_decode_reference_values():
    # shared-exponent formula: m * 2^(e-136); 128 * 2^-7 = 1.0
    assert np.allclose(rio.rgbe_decode(np.array([128, 128, 128, 129], np.uint8)),
                       [1.0, 1.0, 1.0])
    assert np.array_equal(rio.rgbe_decode(np.array([0, 0, 0, 0], np.uint8)),
                          [0.0, 0.0, 0.0])
    # exponent byte 0 is black regardless of mantissas
    assert np.array_equal(rio.rgbe_decode(np.array([10, 20, 30, 0], np.uint8)),
                          [0.0, 0.0, 0.0])


def test_rgbe_roundtrip_quantization_bound():
    # error per channel bounded by (pixel max channel)/256
    rng = np.random.default_rng(0)
    for trial in range(20):
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 257))
        scale = float(10.0 ** rng.integers(-3, 5))
        px = (rng.random((h, w, 3)) * scale).astype(np.float32)
        img = rio.HdrImage(px)
        back = rio.read_radiance_hdr(rio.write_radiance_hdr(img)).pixels
        err = np.abs(back.astype(np.float64) - px)
        bound = px.max(axis=2, keepdims=True) / 256.0 + 1e-30
        assert (err <= bound).all(), f"trial {trial}: bound exceeded"


def test_rgbe_zero_pixels_exact():
    img = rio.HdrImage(np.zeros((3, 3, 3), np.float32))
    back = rio.read_radiance_hdr(rio.write_radiance_hdr(img)).pixels
    assert np.array_equal(back, img.pixels)


def test_write_header_resolution_line():
    img = rio.HdrImage(np.ones((2, 2, 3), np.float32))
    data = rio.write_radiance_hdr(img)
    assert data.startswith(b"#?RADIANCE\n")
    assert b"-Y 2 +X 2\n" in data


def test_read_foreign_rle_runs_and_literals():
    # hand-built scanline mixing runs and literals per component
    w = 16
    header = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + f"-Y 1 +X {w}\n".encode()
    comp_vals = []
    body = bytearray((2, 2, w >> 8, w & 0xFF))
    rng = np.random.default_rng(7)
    for c in range(4):
        vals = np.zeros(w, np.uint8)
        vals[:5] = 9 + c  # run of 5
        lit = rng.integers(1, 255, size=3).astype(np.uint8)
        vals[5:8] = lit  # literal of 3
        vals[8:] = 33  # run of 8
        comp_vals.append(vals)
        body.extend([128 + 5, 9 + c, 3])
        body.extend(lit.tobytes())
        body.extend([128 + 8, 33])
    img = rio.read_radiance_hdr(header + bytes(body))
    rgbe = np.stack(comp_vals, axis=1)[None]
    assert np.array_equal(img.pixels, rio.rgbe_decode(rgbe))


def test_read_errors():
    with pytest.raises(rio.FormatError):
        rio.read_radiance_hdr(b"not a radiance file")
    good = rio.write_radiance_hdr(rio.HdrImage(np.ones((4, 16, 3), np.float32)))
    with pytest.raises(rio.TruncationError):
        rio.read_radiance_hdr(good[:-20])
    flipped = good.replace(b"-Y 4 +X 16", b"+Y 4 -X 16")
    with pytest.raises(rio.UnsupportedError):
        rio.read_radiance_hdr(flipped)


def test_hdr_image_validation():
    with pytest.raises(ValueError):
        rio.HdrImage(np.zeros((4, 4), np.float32))
    bad = rio.HdrImage(np.full((2, 2, 3), -1.0, np.float32))
    with pytest.raises(ValueError):
        bad.validate()
    nan = rio.HdrImage(np.full((2, 2, 3), np.nan, np.float32))
    with pytest.raises(ValueError):
        nan.validate()


def test_tonemap_reference_values():
    def one(v, exposure=1.0, gamma=2.2):
        img = rio.HdrImage(np.full((1, 1, 3), v, np.float32))
        return rio.tonemap(img, exposure, gamma).pixels[0, 0, 0]

    assert one(1.0, gamma=1.0) == 255
    assert one(0.0) == 0
    # 255 * 0.5^(1/2.2) = 186.06 -> 186
    assert one(0.5) == 186


def test_tonemap_monotone_and_linear_segment():
    rng = np.random.default_rng(1)
    a = rng.random((8, 8, 3)).astype(np.float32)
    b = (a + rng.random((8, 8, 3)).astype(np.float32)).astype(np.float32)
    ta = rio.tonemap(rio.HdrImage(a), 0.7, 2.2).pixels
    tb = rio.tonemap(rio.HdrImage(b), 0.7, 2.2).pixels
    assert (ta <= tb).all()
    # gamma 1: pure linear-then-clamp
    e = 0.5
    t = rio.tonemap(rio.HdrImage(a), e, 1.0).pixels
    expected = np.round(255.0 * np.clip(e * a.astype(np.float64), 0, 1)).astype(np.uint8)
    assert np.array_equal(t, expected)


def test_tonemap_parameter_errors():
    img = rio.HdrImage(np.ones((1, 1, 3), np.float32))
    with pytest.raises(ValueError):
        rio.tonemap(img, exposure=0.0)
    with pytest.raises(ValueError):
        rio.tonemap(img, gamma=-1.0)


def _png_decode(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def test_png_single_white_pixel():
    ldr = rio.LdrImage(np.full((1, 1, 3), 255, np.uint8))
    px = _png_decode(rio.write_png(ldr))
    assert px.shape == (1, 1, 3)
    assert (px == 255).all()


def test_png_roundtrip_exact():
    rng = np.random.default_rng(2)
    px = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    back = _png_decode(rio.write_png(rio.LdrImage(px)))
    assert np.array_equal(back, px)


def test_png_gradient_through_reference_decoder():
    g = np.zeros((2, 3, 3), np.uint8)
    g[..., 0] = np.arange(6).reshape(2, 3) * 40
    g[..., 1] = 128
    g[..., 2] = 255 - g[..., 0]
    back = _png_decode(rio.write_png(rio.LdrImage(g)))
    assert np.array_equal(back, g)
