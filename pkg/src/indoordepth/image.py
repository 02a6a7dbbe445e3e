"""Dense image and depth buffers, bilinear resizing, flipping and pyramids.

Pixel centres sit at integer coordinates. Resizing uses the half-pixel
(align-corners false) convention with edge clamping, so halving an image is
exactly a 2x2 box average.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

PYRAMID_LEVELS = 4

RAW_MAGIC = b"RDPF"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """H x W x C intensities in [0, 1], stored as float64."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"expected H x W x (1|3) data, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.width, self.height

    def gray(self) -> np.ndarray:
        return self.data.mean(axis=2)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """H x W positive scalars plus a validity mask.

    Also used for disparity maps. Invalid pixels always hold 0.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"expected H x W values, got shape {values.shape}")
        valid = np.isfinite(values) & (values > 0)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError("mask shape does not match values")
            valid &= mask
        values[~valid] = 0.0
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def inverted(self) -> "DepthMap":
        """Depth <-> disparity (1/x on valid pixels)."""
        out = np.zeros_like(self.values)
        out[self.mask] = 1.0 / self.values[self.mask]
        return DepthMap(out, self.mask)


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation weights, half-pixel centres, clamped."""
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        m.setflags(write=False)
        return m
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def resize_array(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array; linear in ``arr``."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be at least 1x1, got {width}x{height}")
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        return np.array(arr, dtype=np.float64)
    ry = _interp_matrix(h, height)
    rx = _interp_matrix(w, width)
    if arr.ndim == 2:
        return ry @ arr @ rx.T
    return np.einsum("ij,jkc,lk->ilc", ry, arr, rx)


def resize_array_adjoint(grad: np.ndarray, width: int, height: int) -> np.ndarray:
    """Adjoint of :func:`resize_array` mapping a gradient back to ``width x height``."""
    h, w = grad.shape[:2]
    if (h, w) == (height, width):
        return np.array(grad, dtype=np.float64)
    ry = _interp_matrix(height, h)
    rx = _interp_matrix(width, w)
    if grad.ndim == 2:
        return ry.T @ grad @ rx
    return np.einsum("ij,ilc,lk->jkc", ry, grad, rx)


def resize_bilinear(img: ImageBuffer, w: int, h: int) -> ImageBuffer:
    if w < 1 or h < 1:
        raise ValueError(f"target size must be at least 1x1, got {w}x{h}")
    if (w, h) == img.size:
        return img
    out = resize_array(img.data, w, h)
    # interpolation weights sum to one; clip only guards rounding
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def resize_nearest(depth: DepthMap, w: int, h: int) -> DepthMap:
    """Nearest-neighbour resize; never blends values across discontinuities."""
    if w < 1 or h < 1:
        raise ValueError(f"target size must be at least 1x1, got {w}x{h}")
    rows = np.minimum(((np.arange(h) + 0.5) * depth.height / h).astype(int), depth.height - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * depth.width / w).astype(int), depth.width - 1)
    return DepthMap(depth.values[np.ix_(rows, cols)], depth.mask[np.ix_(rows, cols)])


def flip_horizontal(img):
    """Mirror columns. Works for ImageBuffer, DepthMap and bare arrays."""
    if isinstance(img, ImageBuffer):
        return ImageBuffer(img.data[:, ::-1, :])
    if isinstance(img, DepthMap):
        return DepthMap(img.values[:, ::-1], img.mask[:, ::-1])
    return np.asarray(img)[:, ::-1].copy()


def pyramid_sizes(width: int, height: int, levels: int = PYRAMID_LEVELS) -> list[tuple[int, int]]:
    div = 2 ** (levels - 1)
    if width % div or height % div:
        raise ValueError(
            f"pyramid needs width and height divisible by {div}, got {width}x{height}"
        )
    return [(width >> k, height >> k) for k in range(levels)]


def build_pyramid(img: ImageBuffer) -> list[ImageBuffer]:
    sizes = pyramid_sizes(img.width, img.height)
    levels = [img]
    for w, h in sizes[1:]:
        levels.append(resize_bilinear(levels[-1], w, h))
    return levels


# --- file formats ---------------------------------------------------------


def read_image(path) -> ImageBuffer:
    """Read an 8-bit RGB or grayscale PNG/PGM/PPM into unit-range floats."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageBuffer(arr)


def write_image(path, img: ImageBuffer) -> None:
    arr = np.round(img.data * 255.0).astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(np.ascontiguousarray(arr[:, :, 0])).save(path)
    else:
        Image.fromarray(arr).save(path)


def read_png16(path) -> np.ndarray:
    """Raw uint16 values of a single-channel 16-bit PNG."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I"):
            raise ValueError(f"{path}: expected 16-bit single-channel image, got mode {im.mode}")
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single channel")
    if arr.dtype != np.uint16:
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"{path}: values outside the 16-bit range")
        arr = arr.astype(np.uint16)
    return arr


def write_png16(path, raw: np.ndarray) -> None:
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError("16-bit PNG output needs a 2-D array")
    if raw.dtype != np.uint16:
        if raw.min() < 0 or raw.max() > 65535:
            raise ValueError("values outside the 16-bit range")
        raw = raw.astype(np.uint16)
    Image.fromarray(np.ascontiguousarray(raw)).save(path)


def read_raw_depth(path) -> DepthMap:
    """Float map with a 16-byte header: magic, version, width, height (little endian).

    The header is followed by width*height float32 values in row-major order.
    Zero or non-finite entries are invalid.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, width, height = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size)
    if body.size != width * height:
        raise ValueError(f"{path}: expected {width * height} values, found {body.size}")
    return DepthMap(body.reshape(height, width).astype(np.float64))


def write_raw_depth(path, depth: DepthMap) -> None:
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, depth.width, depth.height)
    Path(path).write_bytes(header + depth.values.astype("<f4").tobytes())
