import math

import numpy as np
import pytest

from fgam import imaging
from fgam.errors import MissingProvenance, NotNativeSize, SizeOutOfRange
from fgam.imaging import KB, MB, GrayImage

TABLE_BOUNDARIES = [
    (10 * KB, 32), (10 * KB + 1, 64),
    (30 * KB, 64), (30 * KB + 1, 128),
    (60 * KB, 128), (60 * KB + 1, 256),
    (100 * KB, 256), (100 * KB + 1, 384),
    (200 * KB, 384), (200 * KB + 1, 512),
    (500 * KB, 512), (500 * KB + 1, 768),
    (1 * MB, 768), (1 * MB + 1, 1024),
    (15 * MB, 1024),
]


@pytest.mark.parametrize("size, width", TABLE_BOUNDARIES)
def test_width_table_boundaries(size, width):
    assert imaging.width_for(size) == width


@pytest.mark.parametrize("size, width", [(5 * KB, 32), (150 * KB, 384), (2 * MB, 1024), (1, 32)])
def test_width_examples(size, width):
    assert imaging.width_for(size) == width


@pytest.mark.parametrize("size", [0, -1, 15 * MB + 1])
def test_width_out_of_range(size):
    with pytest.raises(SizeOutOfRange):
        imaging.width_for(size)


def test_width_monotone():
    sizes = np.unique(np.geomspace(1, 15 * MB, 2000).astype(int))
    widths = [imaging.width_for(int(s)) for s in sizes]
    assert all(a <= b for a, b in zip(widths, widths[1:]))


def test_binary2img_100_bytes():
    data = bytes(range(1, 101))
    img = imaging.binary2img(data)
    assert img.shape == (4, 32)
    assert (img.native_width, img.native_height, img.source_length) == (32, 4, 100)
    flat = img.pixels.reshape(-1)
    assert list(flat[:100]) == list(range(1, 101))
    assert np.count_nonzero(flat[100:]) == 0 and flat[100:].size == 28
    assert img.pixels[1, 0] == 33


def test_binary2img_all_ff():
    img = imaging.binary2img(b"\xff" * 32)
    assert img.shape == (1, 32)
    assert np.all(img.pixels == 255)


def test_pe_image_starts_with_mz(small_corpus):
    img = imaging.binary2img(small_corpus[0].data)
    assert img.pixels[0, 0] == 77 and img.pixels[0, 1] == 90


def test_row_count_invariant(small_corpus):
    for s in small_corpus:
        img = imaging.binary2img(s.data)
        m, n = img.native_width, img.native_height
        assert m * n >= len(s.data) > m * (n - 1)


def test_exact_round_trip(small_corpus):
    for s in small_corpus:
        assert imaging.img2binary(imaging.binary2img(s.data)) == s.data


@pytest.mark.parametrize("value, byte", [(254.6, 255), (-3.0, 0), (0.5, 1), (1.5, 2), (2.4999, 2), (300.0, 255)])
def test_quantize(value, byte):
    assert imaging.quantize(np.array([value]))[0] == byte


def test_img2binary_requires_provenance():
    img = GrayImage(np.zeros((1, 32)), 32, 1, None)
    with pytest.raises(MissingProvenance):
        imaging.img2binary(img)


def test_img2binary_requires_native_size():
    img = imaging.binary2img(bytes(100))
    with pytest.raises(NotNativeSize):
        imaging.img2binary(imaging.resize_bilinear(img, 8, 8))


def _brute_resize(pixels, out_h, out_w):
    """Scalar corner-aligned bilinear interpolation, one output pixel at a time."""
    h, w = pixels.shape
    out = np.empty((out_h, out_w))

    def coord(i, n_in, n_out):
        return (n_in - 1) / 2 if n_out == 1 else i * (n_in - 1) / (n_out - 1)

    for i in range(out_h):
        y = coord(i, h, out_h)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = coord(j, w, out_w)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
            bottom = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bottom * fy
    return out


def _img(pixels):
    p = np.asarray(pixels, dtype=np.float64)
    return GrayImage(p, p.shape[1], p.shape[0], p.size)


def test_resize_2x2_to_1x1():
    pixels = np.array([[0.0, 100.0], [100.0, 200.0]])
    out = imaging.resize_bilinear(_img(pixels), 1, 1)
    # the lone sample sits at the centre, where the bilinear surface equals the corner mean
    assert out.pixels[0, 0] == pytest.approx(pixels.mean()) == 100.0
    assert out.pixels[0, 0] == pytest.approx(_brute_resize(pixels, 1, 1)[0, 0])


@pytest.mark.parametrize("shape, target", [((4, 32), (64, 64)), ((37, 128), (64, 64)), ((64, 64), (5, 9)),
                                            ((3, 7), (1, 4)), ((10, 1), (3, 3))])
def test_resize_matches_brute_force(shape, target):
    pixels = np.random.default_rng(sum(shape)).uniform(0, 255, shape)
    out = imaging.resize_bilinear(_img(pixels), *target)
    np.testing.assert_allclose(out.pixels, _brute_resize(pixels, *target), rtol=0, atol=1e-9)


def test_resize_identity_and_constant():
    pixels = np.random.default_rng(0).uniform(0, 255, (6, 9))
    same = imaging.resize_bilinear(_img(pixels), 6, 9)
    assert np.array_equal(same.pixels, pixels)
    const = imaging.resize_bilinear(_img(np.full((7, 13), 42.0)), 20, 3)
    np.testing.assert_allclose(const.pixels, 42.0, atol=1e-12)


def test_resize_convex(small_corpus):
    for s in small_corpus[:6]:
        img = imaging.binary2img(s.data)
        out = imaging.resize_bilinear(img, 64, 64)
        assert out.pixels.min() >= img.pixels.min() - 1e-9
        assert out.pixels.max() <= img.pixels.max() + 1e-9


def test_resize_keeps_provenance(small_corpus):
    img = imaging.binary2img(small_corpus[1].data)
    small = imaging.to_model_input(small_corpus[1].data)
    assert small.shape == (64, 64)
    assert (small.native_width, small.native_height, small.source_length) == (
        img.native_width, img.native_height, img.source_length)
    assert imaging.to_native(small).shape == img.shape


def test_down_up_error_pinned(small_corpus):
    errors = []
    for s in small_corpus:
        img = imaging.binary2img(s.data)
        back = imaging.to_native(imaging.resize_bilinear(img, 64, 64))
        errors.append(np.abs(back.pixels - img.pixels))
    assert max(e.max() for e in errors) <= 255.0
    assert np.mean([e.mean() for e in errors]) == pytest.approx(43.49975300233272, rel=1e-9)


def test_pgm_round_trip(tmp_path):
    img = imaging.binary2img(bytes(range(256)) * 3)
    path = tmp_path / "x.pgm"
    imaging.write_pgm(img, path)
    assert path.read_bytes().startswith(b"P5\n32 24\n255\n")
    assert np.array_equal(imaging.read_pgm(path), img.pixels.astype(np.uint8))
