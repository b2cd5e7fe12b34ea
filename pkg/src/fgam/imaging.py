"""Byte-image conversion: width table, Binary2img, Img2binary and bilinear resize."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fgam.errors import MissingProvenance, NotNativeSize, SizeOutOfRange

KB = 1024
MB = 1024 * KB

# (inclusive upper bound in bytes, image width)
WIDTH_TABLE: tuple[tuple[int, int], ...] = (
    (10 * KB, 32),
    (30 * KB, 64),
    (60 * KB, 128),
    (100 * KB, 256),
    (200 * KB, 384),
    (500 * KB, 512),
    (1024 * KB, 768),
    (15 * MB, 1024),
)
MAX_SIZE = WIDTH_TABLE[-1][0]
_BOUNDS = [b for b, _ in WIDTH_TABLE]

DEFAULT_INPUT_SIZE = 64


@dataclass(frozen=True)
class GrayImage:
    """Pixels (height x width) plus enough provenance to map back to bytes."""

    pixels: np.ndarray
    native_width: int
    native_height: int
    source_length: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def is_native(self) -> bool:
        return self.pixels.shape == (self.native_height, self.native_width)

    def with_pixels(self, pixels: np.ndarray) -> "GrayImage":
        return replace(self, pixels=pixels)


def width_for(size: int) -> int:
    if not 0 < size <= MAX_SIZE:
        raise SizeOutOfRange(f"file size {size} outside (0, {MAX_SIZE}]")
    return WIDTH_TABLE[bisect.bisect_left(_BOUNDS, size)][1]


def binary2img(data: bytes) -> GrayImage:
    """Lay bytes out row-major in an m-wide image, zero-padding the last row."""
    length = len(data)
    m = width_for(length)
    n = -(-length // m)
    flat = np.zeros(m * n, dtype=np.float64)
    flat[:length] = np.frombuffer(bytes(data), dtype=np.uint8)
    return GrayImage(flat.reshape(n, m), native_width=m, native_height=n, source_length=length)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round half away from zero, then clamp to the byte range."""
    p = np.asarray(pixels, dtype=np.float64)
    rounded = np.sign(p) * np.floor(np.abs(p) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def img2binary(img: GrayImage) -> bytes:
    if img.source_length is None:
        raise MissingProvenance("image carries no source_length")
    if not img.is_native:
        raise NotNativeSize(f"image is {img.shape}, native size is {(img.native_height, img.native_width)}")
    return quantize(img.pixels).reshape(-1)[: img.source_length].tobytes()


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows hold the linear-interpolation weights of each output sample.

    Samples are corner aligned (first and last output land on the first and
    last input); a single output sample sits at the centre of the input span.
    """
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def resize_bilinear(img: GrayImage, out_h: int, out_w: int) -> GrayImage:
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.with_pixels(img.pixels.copy())
    pixels = interpolation_matrix(h, out_h) @ img.pixels @ interpolation_matrix(w, out_w).T
    return img.with_pixels(pixels)


def to_model_input(data: bytes, size: int = DEFAULT_INPUT_SIZE) -> GrayImage:
    """Binary2img followed by the resize to the detector's square input."""
    return resize_bilinear(binary2img(data), size, size)


def to_native(img: GrayImage) -> GrayImage:
    return resize_bilinear(img, img.native_height, img.native_width)


def write_pgm(img: GrayImage, path: Path) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(img.pixels).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
