"""8-bit RGB image codec (PNG subset and binary PPM) plus quantization helpers.

Images are float32 numpy arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import re
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import bilinear_matrix

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Malformed or truncated image bytes."""


class UnsupportedImageError(ImageFormatError):
    """Well-formed file using a feature outside 8-bit RGB."""


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image pixels must lie in [0, 1]")
    return img


def to_bytes(img) -> np.ndarray:
    """round(p * 255) with halves away from zero, clamped to [0, 255]."""
    scaled = np.asarray(img, dtype=np.float64) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float64) / 255.0).astype(np.float32)


def quantize_roundtrip(img) -> np.ndarray:
    return from_bytes(to_bytes(check_image(img)))


def resize_bilinear_eval(img, h: int, w: int) -> np.ndarray:
    """Corner-aligned bilinear resize outside any graph."""
    img = check_image(img)
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    if img.shape[:2] == (h, w):
        return img.copy()
    rows = bilinear_matrix(img.shape[0], h)
    cols = bilinear_matrix(img.shape[1], w)
    out = np.einsum("oh,hwc,pw->opc", rows, img.astype(np.float64), cols)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --- PNG ---------------------------------------------------------------------


def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(data, zlib.crc32(kind)) & 0xFFFFFFFF
    return struct.pack(">L", len(data)) + kind + data + struct.pack(">L", crc)


def encode_png(img) -> bytes:
    raw = to_bytes(check_image(img))
    h, w, _ = raw.shape
    header = struct.pack(">LLBBBBB", w, h, 8, 2, 0, 0, 0)
    scanlines = np.concatenate([np.zeros((h, 1), np.uint8), raw.reshape(h, w * 3)], axis=1)
    idat = zlib.compress(scanlines.tobytes(), 9)
    return PNG_SIGNATURE + _chunk(b"IHDR", header) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(data: bytes, h: int, w: int) -> np.ndarray:
    stride = w * 3
    if len(data) != h * (stride + 1):
        raise ImageFormatError(f"decompressed size {len(data)} != expected {h * (stride + 1)}")
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(h):
        ftype = data[y * (stride + 1)]
        line = np.frombuffer(data, np.uint8, stride, y * (stride + 1) + 1).astype(np.int64)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for x in range(stride):
                left = cur[x - 3] if x >= 3 else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + prev[x]) >> 1
                else:
                    pred = _paeth(left, prev[x], prev[x - 3] if x >= 3 else 0)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise ImageFormatError(f"unknown PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def decode_png(data: bytes) -> np.ndarray:
    if not data.startswith(PNG_SIGNATURE):
        raise ImageFormatError("missing PNG signature")
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    seen_end = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageFormatError("truncated chunk header")
        (length,) = struct.unpack(">L", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        crc_bytes = data[pos + 8 + length : pos + 12 + length]
        if len(body) != length or len(crc_bytes) != 4:
            raise ImageFormatError(f"truncated {kind!r} chunk")
        if zlib.crc32(body, zlib.crc32(kind)) & 0xFFFFFFFF != struct.unpack(">L", crc_bytes)[0]:
            raise ImageFormatError(f"CRC mismatch in {kind!r} chunk")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">LLBBBBB", body)
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            seen_end = True
            break
        elif not kind[:1].islower():
            raise UnsupportedImageError(f"unsupported critical chunk {kind!r}")
    if header is None:
        raise ImageFormatError("missing IHDR")
    if not seen_end:
        raise ImageFormatError("missing IEND (truncated file)")
    w, h, depth, ctype, comp, filt, interlace = header
    if depth != 8 or ctype != 2:
        raise UnsupportedImageError(f"only 8-bit RGB is supported (depth={depth}, color type={ctype})")
    if comp != 0 or filt != 0 or interlace != 0:
        raise UnsupportedImageError("interlaced or nonstandard PNG")
    if w == 0 or h == 0:
        raise ImageFormatError("zero image dimension")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"bad zlib stream: {exc}") from exc
    return from_bytes(_unfilter(raw, h, w).reshape(h, w, 3))


# --- PPM ---------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def encode_ppm(img) -> bytes:
    raw = to_bytes(check_image(img))
    h, w, _ = raw.shape
    return b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError("non-integer PPM header field") from exc
    if maxval != 255:
        raise UnsupportedImageError(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError("zero image dimension")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PPM header")
    payload = data[pos + 1 :]
    if len(payload) < w * h * 3:
        raise ImageFormatError(f"truncated PPM payload ({len(payload)} of {w * h * 3} bytes)")
    return from_bytes(np.frombuffer(payload, np.uint8, w * h * 3).reshape(h, w, 3))


# --- dispatch ------------------------------------------------------------------


def encode_image(img, fmt: str = "PNG") -> bytes:
    fmt = fmt.upper()
    if fmt == "PNG":
        return encode_png(img)
    if fmt == "PPM":
        return encode_ppm(img)
    raise ValueError(f"unknown image format {fmt!r}")


def decode_image(data: bytes, fmt: str | None = None) -> np.ndarray:
    if fmt is None:
        fmt = "PNG" if data.startswith(PNG_SIGNATURE) else "PPM"
    fmt = fmt.upper()
    if fmt == "PNG":
        return decode_png(data)
    if fmt == "PPM":
        return decode_ppm(data)
    raise ValueError(f"unknown image format {fmt!r}")


def _format_for(path: Path) -> str:
    return "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"


def load_image(path) -> np.ndarray:
    path = Path(path)
    return decode_image(path.read_bytes(), _format_for(path))


def save_image(img, path) -> None:
    path = Path(path)
    path.write_bytes(encode_image(img, _format_for(path)))
