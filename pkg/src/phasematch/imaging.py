"""Grayscale rasters, PGM I/O and patch handling.

Pixels live as float64 in [0, 1] everywhere inside the package; 8-bit
quantization happens only when writing files.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptHeader, IoFailure, OutOfBounds, UnsupportedFormat

STANDARDIZE_EPS = 1e-6


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image, ``pixels[y, x]`` in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("GrayImage pixels must be finite and in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_array(cls, arr, clip: bool = True) -> "GrayImage":
        arr = np.asarray(arr, dtype=np.float64)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)


@dataclass(frozen=True)
class Patch:
    """Square window cut from an image; ``origin`` is the (x, y) center in the source."""

    pixels: np.ndarray
    origin: tuple = (0, 0)
    size: int = field(init=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ValueError(f"patch must be square, got shape {px.shape}")
        n = px.shape[0]
        if n < 8 or n % 2:
            raise ValueError(f"patch size must be even and >= 8, got {n}")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "size", n)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))


# --------------------------------------------------------------------- PGM I/O

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_tokens(data: bytes, count: int, pos: int = 0):
    out = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise CorruptHeader("truncated PGM header")
        out.append(m.group(1))
        pos = m.end()
    return out, pos


def _decode_pgm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise UnsupportedFormat(f"not a grayscale PGM (magic {magic!r})")
    try:
        (w, h, maxval), pos = _read_tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise CorruptHeader(f"non-integer PGM header field: {exc}") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise CorruptHeader(f"bad PGM header: {w}x{h} maxval {maxval}")

    if magic == b"P5":
        # exactly one whitespace byte separates header from raster
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        nbytes = w * h * dtype.itemsize
        raw = data[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise CorruptHeader(f"raster truncated: expected {nbytes} bytes, got {len(raw)}")
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        try:
            values = np.array(data[pos:].split()[: w * h], dtype=np.float64)
        except ValueError:
            raise CorruptHeader("non-numeric ASCII raster") from None
        if values.size != w * h:
            raise CorruptHeader(f"ASCII raster has {values.size} samples, expected {w * h}")
    if values.max(initial=0) > maxval:
        raise CorruptHeader("sample exceeds maxval")
    return values.reshape(h, w) / maxval


def load_gray(path) -> GrayImage:
    """Read a PGM (P5/P2) or, when Pillow is around, any single-channel raster."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] in (b"P5", b"P2"):
        return GrayImage(_decode_pgm(data))
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError:  # pragma: no cover
        raise UnsupportedFormat(f"{path}: only PGM is supported without Pillow") from None
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I"):
                raise UnsupportedFormat(f"{path}: not a grayscale raster (mode {im.mode})")
            arr = np.asarray(im, dtype=np.float64)
            maxval = 255.0 if im.mode == "L" else 65535.0
    except UnidentifiedImageError:
        raise UnsupportedFormat(f"{path}: unrecognized raster format") from None
    return GrayImage(arr / maxval)


def to_uint8(img) -> np.ndarray:
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    return np.rint(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_gray(img: GrayImage, path) -> None:
    """Write ``img`` as binary 8-bit PGM (or PNG when the suffix asks for it)."""
    path = os.fspath(path)
    q = to_uint8(img)
    try:
        if path.lower().endswith(".png"):
            from PIL import Image

            Image.fromarray(q, mode="L").save(path)
            return
        header = b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0])
        with open(path, "wb") as fh:
            fh.write(header + q.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def rescale(arr) -> GrayImage:
    """Linearly stretch an arbitrary real map onto [0, 1] for inspection rasters."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0:
        return GrayImage(np.zeros_like(arr))
    return GrayImage((arr - lo) / (hi - lo))


# --------------------------------------------------------------------- patches

def window_bounds(cx: int, cy: int, size: int):
    """Half-open (x0, x1, y0, y1) of the size x size window centered at (cx, cy)."""
    half = size // 2
    return cx - half, cx - half + size, cy - half, cy - half + size


def window_inside(width: int, height: int, cx: int, cy: int, size: int) -> bool:
    x0, x1, y0, y1 = window_bounds(cx, cy, size)
    return x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height


def extract_patch(img: GrayImage, cx: int, cy: int, size: int) -> Patch:
    cx, cy = int(cx), int(cy)
    if not window_inside(img.width, img.height, cx, cy, size):
        raise OutOfBounds(
            f"{size}x{size} window at ({cx}, {cy}) crosses the edge of a "
            f"{img.width}x{img.height} image"
        )
    x0, x1, y0, y1 = window_bounds(cx, cy, size)
    return Patch(img.pixels[y0:y1, x0:x1].copy(), origin=(cx, cy))


def standardize_array(px: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Zero-mean, unit-std copy of ``px`` (std clamped below by ``eps``).

    Works on a single patch or on a stack whose last two axes are the patch.
    """
    px = np.asarray(px, dtype=np.float64)
    mu = px.mean(axis=(-2, -1), keepdims=True)
    centered = px - mu
    sd = np.sqrt(np.mean(centered * centered, axis=(-2, -1), keepdims=True))
    return centered / np.maximum(sd, eps)


def standardize(patch: Patch) -> Patch:
    return Patch(standardize_array(patch.pixels), origin=patch.origin)
