"""PGM (P5), PFM (Pf) and SVCM codecs.

PGM samples load as floats in [0, 1] and save clamped and quantized to 8 or
16 bits (big-endian, as the format requires). PFM is grayscale float32 with
rows stored bottom to top; a negative scale means little-endian, which is
what we write. SVCM holds a covariance map:

    offset  size  field
    0       4     magic "SVCM"
    4       1     version (1)
    5       3     reserved, zero
    8       4     width,  u32 little-endian
    12      4     height, u32 little-endian
    16      12·w·h   (c11, c12, c22) float32 little-endian, row-major from top-left
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svfilter.services.shape_algebra import CovarianceMap

logger = logging.getLogger(__name__)

SVCM_MAGIC = b"SVCM"
SVCM_VERSION = 1
SVCM_HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "u1"),
    ("reserved", "V3"),
    ("width", "<u4"),
    ("height", "<u4"),
])
SVCM_RECORD = np.dtype("<f4")
PGM_MAXVALS = (255, 65535)

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


@dataclass
class ImageFile:
    format: str            # "pgm" or "pfm"
    data: np.ndarray       # float64, [row, col]
    maxval: int | None = None

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    that ends the header.
    """
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise FormatError(f"truncated header at byte {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"expected one whitespace byte after the header at byte {pos}")
    return tokens, pos + 1


def _dimension(token: bytes, name: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"{name} {token!r} is not an integer") from None
    if value <= 0:
        raise FormatError(f"{name} must be positive, got {value}")
    return value


# ── PGM ─────────────────────────────────────────────────────────────────────


def decode_pgm(buf: bytes) -> ImageFile:
    if buf[:2] != b"P5":
        raise FormatError(f"not a binary PGM: magic {buf[:2]!r}")
    tokens, offset = _header_tokens(buf, 4)
    width = _dimension(tokens[1], "width")
    height = _dimension(tokens[2], "height")
    maxval = _dimension(tokens[3], "maxval")
    if maxval not in PGM_MAXVALS:
        raise FormatError(f"maxval must be one of {PGM_MAXVALS}, got {maxval}")
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    expected = offset + width * height * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"PGM {width}x{height} maxval {maxval} needs {expected} bytes, got {len(buf)}")
    samples = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(height, width)
    return ImageFile("pgm", samples.astype(np.float64) / maxval, maxval)


def encode_pgm(data: np.ndarray, maxval: int = 255) -> bytes:
    if maxval not in PGM_MAXVALS:
        raise FormatError(f"maxval must be one of {PGM_MAXVALS}, got {maxval}")
    data = np.asarray(data, dtype=float)
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    samples = np.rint(np.clip(data, 0.0, 1.0) * maxval).astype(dtype)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n{maxval}\n".encode("ascii")
    return header + samples.tobytes()


# ── PFM ─────────────────────────────────────────────────────────────────────


def decode_pfm(buf: bytes) -> ImageFile:
    if buf[:2] != b"Pf":
        raise FormatError(f"not a grayscale PFM: magic {buf[:2]!r}")
    tokens, offset = _header_tokens(buf, 4)
    width = _dimension(tokens[1], "width")
    height = _dimension(tokens[2], "height")
    try:
        scale = float(tokens[3])
    except ValueError:
        raise FormatError(f"scale {tokens[3]!r} is not a number") from None
    if scale == 0:
        raise FormatError("scale must be nonzero")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    expected = offset + 4 * width * height
    if len(buf) != expected:
        raise FormatError(f"PFM {width}x{height} needs {expected} bytes, got {len(buf)}")
    samples = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(height, width)
    return ImageFile("pfm", samples[::-1].astype(np.float64))


def encode_pfm(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    header = f"Pf\n{data.shape[1]} {data.shape[0]}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(data[::-1], dtype="<f4").tobytes()


# ── Files ───────────────────────────────────────────────────────────────────


def read_image(path: str | Path) -> ImageFile:
    buf = Path(path).read_bytes()
    if buf[:2] == b"P5":
        image = decode_pgm(buf)
    elif buf[:2] == b"Pf":
        image = decode_pfm(buf)
    else:
        raise FormatError(f"{path}: unsupported image format (magic {buf[:2]!r}); expected P5 or Pf")
    logger.debug("read %s: %s %dx%d", path, image.format, image.width, image.height)
    return image


def write_image(path: str | Path, data: np.ndarray, *, fmt: str | None = None, maxval: int = 255) -> None:
    """Write PFM or PGM, chosen by `fmt` or else by the file suffix."""
    path = Path(path)
    fmt = fmt or ("pgm" if path.suffix.lower() == ".pgm" else "pfm")
    if fmt == "pgm":
        path.write_bytes(encode_pgm(data, maxval))
    elif fmt == "pfm":
        path.write_bytes(encode_pfm(data))
    else:
        raise FormatError(f"unknown image format {fmt!r}")


# ── SVCM ────────────────────────────────────────────────────────────────────


def decode_covmap(buf: bytes) -> CovarianceMap:
    if len(buf) < SVCM_HEADER.itemsize:
        raise FormatError(f"SVCM header needs {SVCM_HEADER.itemsize} bytes, got {len(buf)}")
    header = np.frombuffer(buf, dtype=SVCM_HEADER, count=1)[0]
    if header["magic"] != SVCM_MAGIC:
        raise FormatError(f"bad magic {bytes(header['magic'])!r} at byte 0, expected {SVCM_MAGIC!r}")
    if header["version"] != SVCM_VERSION:
        raise FormatError(f"unsupported version {int(header['version'])} at byte 4")
    if any(bytes(header["reserved"])):
        raise FormatError("reserved bytes 5..7 must be zero")
    width, height = int(header["width"]), int(header["height"])
    if width == 0 or height == 0:
        raise FormatError(f"empty covariance map {width}x{height}")
    expected = SVCM_HEADER.itemsize + 12 * width * height
    if len(buf) != expected:
        raise FormatError(f"SVCM {width}x{height} needs {expected} bytes, got {len(buf)}")

    records = np.frombuffer(buf, dtype=SVCM_RECORD, offset=SVCM_HEADER.itemsize)
    planes = records.reshape(height, width, 3).astype(np.float64)
    c11, c12, c22 = planes[..., 0], planes[..., 1], planes[..., 2]
    bad = ~(np.isfinite(planes).all(axis=-1) & (c11 > 0) & (c22 > 0) & (c11 * c22 - c12 * c12 > 0))
    if bad.any():
        row, col = (int(v) for v in np.argwhere(bad)[0])
        offset = SVCM_HEADER.itemsize + 12 * (row * width + col)
        raise FormatError(f"record at pixel (row={row}, col={col}), byte {offset}, "
                          f"is not positive definite: {planes[row, col].tolist()}")
    return CovarianceMap(c11, c12, c22)


def encode_covmap(covmap: CovarianceMap) -> bytes:
    height, width = covmap.shape
    header = np.zeros(1, dtype=SVCM_HEADER)
    header["magic"] = SVCM_MAGIC
    header["version"] = SVCM_VERSION
    header["width"] = width
    header["height"] = height
    return header.tobytes() + np.ascontiguousarray(covmap.stack(), dtype=SVCM_RECORD).tobytes()


def read_covmap(path: str | Path) -> CovarianceMap:
    try:
        return decode_covmap(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_covmap(path: str | Path, covmap: CovarianceMap) -> None:
    Path(path).write_bytes(encode_covmap(covmap))
