"""Image ingestion/output, rectification remap, downsampling, gradients.

All pixel containers are thin wrappers over numpy arrays.  Every operation
here is a pure function of its inputs; returned objects are safe to share
between pipeline stages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_REMAP_MAGIC = b"RMAP"
_REMAP_VERSION = 1


class MalformedImageError(ValueError):
    """File exists but its contents do not parse as a valid image."""


class UnsupportedImageError(ValueError):
    """File parses but uses a format/bit depth this toolkit does not accept."""


@dataclass
class GrayImage:
    """8-bit single-channel raster, row-major, shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ValueError(f"GrayImage needs a 2D array, got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("GrayImage dimensions must be at least 1x1")
        if self.pixels.dtype != np.uint8:
            if self.pixels.min() < 0 or self.pixels.max() > 255:
                raise ValueError("intensities must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)


@dataclass
class StereoPair:
    """Rectified left/right images with identical dimensions."""

    left: GrayImage
    right: GrayImage

    def __post_init__(self):
        if self.left.pixels.shape != self.right.pixels.shape:
            raise ValueError(
                f"stereo pair dimensions differ: left {self.left.pixels.shape}, "
                f"right {self.right.pixels.shape}"
            )

    @property
    def width(self) -> int:
        return self.left.width

    @property
    def height(self) -> int:
        return self.left.height


@dataclass
class RemapTable:
    """Per-destination-pixel fractional source coordinates; NaN marks invalid."""

    src_x: np.ndarray
    src_y: np.ndarray

    def __post_init__(self):
        self.src_x = np.asarray(self.src_x, dtype=np.float32)
        self.src_y = np.asarray(self.src_y, dtype=np.float32)
        if self.src_x.shape != self.src_y.shape or self.src_x.ndim != 2:
            raise ValueError("remap coordinate planes must be 2D and share a shape")

    @property
    def width(self) -> int:
        return self.src_x.shape[1]

    @property
    def height(self) -> int:
        return self.src_x.shape[0]

    @staticmethod
    def identity(width: int, height: int) -> "RemapTable":
        ys, xs = np.mgrid[0:height, 0:width]
        return RemapTable(xs.astype(np.float32), ys.astype(np.float32))


@dataclass
class GradientMap:
    """Per-pixel non-negative gradient magnitude, same shape as its source."""

    magnitude: np.ndarray

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        if self.magnitude.ndim != 2:
            raise ValueError("gradient magnitude must be 2D")
        if self.magnitude.size and self.magnitude.min() < 0:
            raise ValueError("gradient magnitude must be non-negative")


def _read_pnm_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    # skip whitespace and '#' comments, then read one token
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise MalformedImageError(f"{path}: truncated header")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def _load_pgm(path: Path) -> GrayImage:
    data = path.read_bytes()
    if len(data) < 2:
        raise MalformedImageError(f"{path}: too short to be a PGM file")
    magic = data[:2]
    if magic == b"P6":
        raise UnsupportedImageError(f"{path}: P6 color PPM is not supported, need P5 grayscale")
    if magic != b"P5":
        raise UnsupportedImageError(f"{path}: not a binary PGM (magic {magic!r})")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_pnm_token(data, pos, path)
        try:
            fields.append(int(token))
        except ValueError:
            raise MalformedImageError(f"{path}: non-numeric header field {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedImageError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedImageError(f"{path}: maxval {maxval} unsupported, only 8-bit (255)")
    pos += 1  # single whitespace byte separates header from raster
    body = data[pos : pos + width * height]
    if len(body) != width * height:
        raise MalformedImageError(
            f"{path}: truncated pixel data, expected {width * height} bytes, got {len(body)}"
        )
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return GrayImage(pixels.copy())


def _load_png(path: Path) -> GrayImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode != "L":
            raise UnsupportedImageError(
                f"{path}: PNG mode {im.mode!r} unsupported, need 8-bit grayscale (L)"
            )
        return GrayImage(np.asarray(im, dtype=np.uint8).copy())


def load_image(path) -> GrayImage:
    """Load a binary PGM (P5, maxval 255) or 8-bit grayscale PNG.

    Raises FileNotFoundError, MalformedImageError, or UnsupportedImageError;
    messages always name the offending path.
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"image file not found: {p}")
    head = p.read_bytes()[:8]
    if head[:4] == b"\x89PNG":
        return _load_png(p)
    return _load_pgm(p)


def save_image(img: GrayImage, path) -> None:
    """Write img losslessly; format picked from the suffix (.png else PGM P5)."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(img.pixels, mode="L").save(p)
        return
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    p.write_bytes(header + img.pixels.tobytes())


def save_remap_table(table: RemapTable, path) -> None:
    """Binary remap file: 16-byte header (magic, version, dims), then
    interleaved little-endian float32 (src_x, src_y) pairs, NaN = invalid."""
    header = _REMAP_MAGIC + struct.pack("<Bxxx", _REMAP_VERSION)
    header += struct.pack("<II", table.width, table.height)
    interleaved = np.empty((table.height, table.width, 2), dtype="<f4")
    interleaved[..., 0] = table.src_x
    interleaved[..., 1] = table.src_y
    Path(path).write_bytes(header + interleaved.tobytes())


def load_remap_table(path) -> RemapTable:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"remap table not found: {p}")
    data = p.read_bytes()
    if len(data) < 16 or data[:4] != _REMAP_MAGIC:
        raise MalformedImageError(f"{p}: not a remap table (bad magic)")
    version = data[4]
    if version != _REMAP_VERSION:
        raise UnsupportedImageError(f"{p}: remap table version {version} unsupported")
    width, height = struct.unpack("<II", data[8:16])
    expect = width * height * 2 * 4
    body = data[16 : 16 + expect]
    if len(body) != expect:
        raise MalformedImageError(f"{p}: truncated remap table body")
    interleaved = np.frombuffer(body, dtype="<f4").reshape(height, width, 2)
    return RemapTable(interleaved[..., 0].copy(), interleaved[..., 1].copy())


def bilinear_sample(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a 2D array at fractional coordinates.

    Coordinates outside [0, w-1] x [0, h-1] or NaN produce 0.  Returns float64.
    """
    h, w = pixels.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = np.isfinite(xs) & np.isfinite(ys)
    valid &= (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(valid, xs, 0.0)
    yc = np.where(valid, ys, 0.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    img = pixels.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(valid, out, 0.0)


def apply_remap(img: GrayImage, table: RemapTable) -> GrayImage:
    """Warp img through a remap table (bilinear); invalid entries give 0."""
    out = bilinear_sample(img.pixels, table.src_x, table.src_y)
    return GrayImage(np.floor(out + 0.5).clip(0, 255).astype(np.uint8))


def resize_bilinear(img: GrayImage, width: int, height: int) -> GrayImage:
    """Rescale to width x height by bilinear sampling at block centers."""
    if width < 1 or height < 1:
        raise ValueError("target size must be positive")
    sx = img.width / width
    sy = img.height / height
    xs = (np.arange(width) + 0.5) * sx - 0.5
    ys = (np.arange(height) + 0.5) * sy - 0.5
    xs = np.clip(xs, 0, img.width - 1)
    ys = np.clip(ys, 0, img.height - 1)
    grid_x = np.broadcast_to(xs, (height, width))
    grid_y = np.broadcast_to(ys[:, None], (height, width))
    out = bilinear_sample(img.pixels, grid_x, grid_y)
    return GrayImage(np.floor(out + 0.5).clip(0, 255).astype(np.uint8))


def downsample_half(img: GrayImage) -> GrayImage:
    """Halve each axis; output pixel = rounded mean of its 2x2 source block.

    Output is ceil(w/2) x ceil(h/2); edge blocks use the pixels available.
    Rounding is half-up.
    """
    if img.width < 2 or img.height < 2:
        raise ValueError("downsample_half needs at least 2 pixels per axis")
    px = img.pixels.astype(np.float64)
    h, w = px.shape
    row_idx = np.arange(0, h, 2)
    col_idx = np.arange(0, w, 2)
    sums = np.add.reduceat(np.add.reduceat(px, row_idx, axis=0), col_idx, axis=1)
    row_counts = np.minimum(row_idx + 2, h) - row_idx
    col_counts = np.minimum(col_idx + 2, w) - col_idx
    counts = np.outer(row_counts, col_counts)
    return GrayImage(np.floor(sums / counts + 0.5).astype(np.uint8))


def gradient_magnitude(img: GrayImage) -> GradientMap:
    """|G| = (|central horizontal diff| + |central vertical diff|) / 2.

    Borders replicate the edge pixel, so the one-sided difference is halved
    there just like in the interior.  Values land in [0, 255].
    """
    px = img.pixels.astype(np.float64)
    padded = np.pad(px, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return GradientMap((np.abs(gx) + np.abs(gy)) / 2.0)
