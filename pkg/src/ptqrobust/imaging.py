"""RGB rasters, P6 PPM I/O and the baseline JPEG codec used by the compression degradation.

Images are plain numpy arrays of shape ``(height, width, 3)``: ``uint8`` for the
byte domain and ``float32`` in ``[0, 1]`` for the normalized domain.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CodecError, ImageFormatError, InvalidRangeError, TruncatedDataError, UnsupportedFormatError

# ITU-T T.81 Annex K example tables, natural (row-major) order.
BASE_LUMA_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64)

BASE_CHROMA_TABLE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.int64)


def new_image(height: int, width: int, fill=0) -> np.ndarray:
    return np.full((height, width, 3), fill, dtype=np.uint8)


def check_u8(img: np.ndarray) -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 raster, got {img.dtype} {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("raster must be at least 1x1")
    return img


def to_f32(img: np.ndarray) -> np.ndarray:
    return check_u8(img).astype(np.float32) / np.float32(255.0)


def to_u8(img: np.ndarray) -> np.ndarray:
    """Scale by 255, round half away from zero, clamp to the byte range."""
    scaled = np.asarray(img, dtype=np.float64) * 255.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- PPM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of PPM header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P5"):
        raise UnsupportedFormatError(f"unsupported netpbm variant {magic.decode()}, only P6 is accepted")
    if magic != b"P6":
        raise ImageFormatError("not a PPM file")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad PPM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError("PPM dimensions must be positive")
    if maxval != 255:
        raise UnsupportedFormatError(f"unsupported maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PPM header")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise TruncatedDataError(f"PPM payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = check_u8(img)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_ppm(img: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_ppm(img))


# -------------------------------------------------------------------------- JPEG


def quality_scale(quality: int) -> int:
    """Percentage applied to the base tables for a 1..100 quality setting."""
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise InvalidRangeError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quality_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """Luma and chroma quantization tables (natural order) for ``quality``."""
    scale = quality_scale(quality)
    tables = []
    for base in (BASE_LUMA_TABLE, BASE_CHROMA_TABLE):
        # base * scale is an integer, so floor(x/100 + 1/2) is exact round-half-up
        entries = (base * scale + 50) // 100
        tables.append(np.clip(entries, 1, 255))
    return tables[0], tables[1]


# Pillow's subsampling codes
SUBSAMPLING = {"4:4:4": 0, "4:2:2": 1, "4:2:0": 2}
DEFAULT_SUBSAMPLING = "4:4:4"


def jpeg_encode(img: np.ndarray, quality: int, subsampling: str = DEFAULT_SUBSAMPLING) -> bytes:
    """Baseline sequential JFIF with tables from :func:`quality_tables`.

    Full-resolution chroma is the default: on small synthetic rasters 4:2:0 bleeds
    color across every shape border and swamps the quantization-table effect.
    """
    if subsampling not in SUBSAMPLING:
        raise InvalidRangeError(f"unknown chroma subsampling {subsampling!r}")
    luma, chroma = quality_tables(quality)
    img = check_u8(img)
    buf = io.BytesIO()
    try:
        Image.fromarray(img, mode="RGB").save(
            buf, format="JPEG", qtables=[luma.tolist(), chroma.tolist()],
            subsampling=SUBSAMPLING[subsampling], progressive=False, optimize=False,
        )
    except (OSError, ValueError) as exc:
        raise CodecError(f"JPEG encode failed: {exc}") from exc
    return buf.getvalue()


def jpeg_decode(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "JPEG":
                raise CodecError(f"not a JPEG stream ({im.format})")
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except CodecError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on garbage input
        raise CodecError(f"undecodable JPEG stream: {exc}") from exc


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    diff = reference.astype(np.float64) - test.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(255.0 ** 2 / mse)
