"""8-bit grayscale images: I/O, orientation, inversion, equalisation, resizing."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import kernels


class ImageError(Exception):
    pass


class UnsupportedFormat(ImageError):
    pass


class CorruptFile(ImageError):
    pass


class IoFailure(ImageError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel uint8 raster stored as a ``(height, width)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.issubdtype(px.dtype, np.floating) and not np.all(np.isfinite(px)):
                raise ValueError("non-finite intensities")
            if px.min() < 0 or px.max() > 255:
                raise ValueError("intensities must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self):
        return self.pixels.shape

    @classmethod
    def from_list(cls, width: int, height: int, values) -> GrayImage:
        values = list(values)
        if len(values) != width * height:
            raise ValueError("pixel count does not match width x height")
        return cls(np.array(values, dtype=np.int64).reshape(height, width))

    def tolist(self) -> list[int]:
        return self.pixels.ravel().tolist()

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


def round_half_up(values) -> np.ndarray:
    """Round to nearest integer, halves upward, then clip to [0, 255]."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens after the magic number."""
    tokens = []
    pos = 2
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptFile("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise CorruptFile("malformed PGM header")
    return tokens, pos + 1


def _load_pgm(data: bytes) -> GrayImage:
    tokens, offset = _pgm_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise CorruptFile(f"non-numeric PGM header field: {exc}") from None
    if maxval != 255:
        raise UnsupportedFormat(f"only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise CorruptFile(f"invalid PGM dimensions {width}x{height}")
    payload = data[offset:]
    if len(payload) != width * height:
        raise CorruptFile(f"PGM payload has {len(payload)} bytes, header declares {width * height}")
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy())


def _load_png(path) -> GrayImage:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise UnsupportedFormat(f"PNG must be 8-bit grayscale (mode L), got mode {im.mode}")
            arr = np.array(im, dtype=np.uint8)
    except UnsupportedFormat:
        raise
    except OSError as exc:
        raise CorruptFile(f"unreadable PNG {path}: {exc}") from exc
    return GrayImage(arr)


def load_image(path) -> GrayImage:
    """Read an 8-bit grayscale P5 PGM or PNG without any rescaling."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if head[:2] == b"P5":
        with open(path, "rb") as fh:
            return _load_pgm(fh.read())
    if head == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    if head[:1] == b"P" and head[1:2] in b"1234567":
        raise UnsupportedFormat(f"only binary grayscale PGM (P5) is supported: {path}")
    raise UnsupportedFormat(f"unrecognised image format: {path}")


def save_image(img: GrayImage, path) -> None:
    """Write P5 PGM, or PNG when the path ends in ``.png``."""
    path = os.fspath(path)
    try:
        if path.lower().endswith(".png"):
            from PIL import Image

            Image.fromarray(img.pixels, mode="L").save(path, format="PNG")
        else:
            with open(path, "wb") as fh:
                fh.write(b"P5\n%d %d\n255\n" % (img.width, img.height))
                fh.write(img.pixels.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def horizontal_mirror(img: GrayImage) -> GrayImage:
    return GrayImage(img.pixels[:, ::-1])


def vertical_flip(img: GrayImage) -> GrayImage:
    return GrayImage(img.pixels[::-1, :])


def invert(img: GrayImage) -> GrayImage:
    return GrayImage(255 - img.pixels)


def _frame_width(n: int) -> int:
    return max(1, int(np.floor(0.05 * n + 0.5)))


def is_negative_channel(img: GrayImage) -> bool:
    """Judge an image intensity-inverted when its border is brighter than its centre.

    Border: the outer 5% of rows and columns (at least one pixel each side).
    Centre: the middle 50% x 50% window. Ties count as not inverted.
    """
    px = img.pixels.astype(np.float64)
    h, w = px.shape
    fr, fc = _frame_width(h), _frame_width(w)
    mask = np.zeros((h, w), dtype=bool)
    mask[:fr, :] = True
    mask[h - fr:, :] = True
    mask[:, :fc] = True
    mask[:, w - fc:] = True
    r0 = int(np.floor(h * 0.25 + 0.5))
    r1 = max(r0 + 1, int(np.floor(h * 0.75 + 0.5)))
    c0 = int(np.floor(w * 0.25 + 0.5))
    c1 = max(c0 + 1, int(np.floor(w * 0.75 + 0.5)))
    border_mean = px[mask].mean()
    center_mean = px[r0:r1, c0:c1].mean()
    return bool(border_mean > center_mean)


@dataclass(frozen=True)
class EqualizationTable:
    map: np.ndarray
    cdf_min: int
    total: int


def equalization_table(img: GrayImage) -> EqualizationTable:
    hist = np.bincount(img.pixels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    total = int(cdf[-1])
    cdf_min = int(cdf[cdf > 0][0])
    if total == cdf_min:
        lut = np.arange(256, dtype=np.uint8)
    else:
        # exact integer round-half-up of 255 * (cdf - cdf_min) / (total - cdf_min)
        den = total - cdf_min
        num = np.maximum(cdf - cdf_min, 0).astype(np.int64)
        lut = ((510 * num + den) // (2 * den)).astype(np.uint8)
    return EqualizationTable(lut, cdf_min, total)


def equalize_histogram(img: GrayImage) -> GrayImage:
    """Histogram equalisation; constant images are returned unchanged."""
    table = equalization_table(img)
    return GrayImage(table.map[img.pixels])


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return img
    return GrayImage(round_half_up(kernels.bilinear_resize(img.pixels, out_h, out_w)))
