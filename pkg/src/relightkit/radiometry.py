"""HDR/LDR image containers, Radiance RGBE file I/O, tone mapping and PNG export.

All radiance math is linear float32; accumulating code elsewhere widens to
float64. The RGBE codec implements the Radiance picture format: ``#?RADIANCE``
header, ``-Y H +X W`` resolution line, and either flat RGBE quadruples or the
component-wise RLE scanline encoding.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

# Shared-exponent decode: value = mantissa * 2^(exponent - 136). The -136
# folds together the +128 exponent bias and the /256 mantissa normalization.
_RGBE_EXP_BIAS = 136


class FormatError(ValueError):
    """Input bytes do not form a valid image file."""


class TruncationError(FormatError):
    """File ended mid-scanline."""


class UnsupportedError(FormatError):
    """Valid file, but an orientation/feature we do not handle."""


def _as_pixels(img) -> np.ndarray:
    return img.pixels if hasattr(img, "pixels") else np.asarray(img)


@dataclass
class HdrImage:
    """Linear-radiance raster, shape (height, width, 3), float32."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.dtype != np.float32:
            px = px.astype(np.float32)
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def validate(self) -> "HdrImage":
        if not np.isfinite(self.pixels).all():
            raise ValueError("HdrImage contains non-finite values")
        if (self.pixels < 0).any():
            raise ValueError("HdrImage contains negative radiance")
        return self


@dataclass
class LdrImage:
    """Display-ready 8-bit RGB raster, shape (height, width, 3), uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError("LdrImage pixels must be uint8")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def rgbe_decode(rgbe: np.ndarray) -> np.ndarray:
    """(..., 4) uint8 RGBE -> (..., 3) float32. Exponent 0 decodes to black."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    mant = rgbe[..., :3].astype(np.float32)
    exp = rgbe[..., 3].astype(np.int32) - _RGBE_EXP_BIAS
    out = np.ldexp(mant, exp[..., None])
    out[rgbe[..., 3] == 0] = 0.0
    return out


def rgbe_encode(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) float -> (..., 4) uint8 RGBE with a rounded shared exponent."""
    rgb = np.asarray(rgb, dtype=np.float32)
    flat = rgb.reshape(-1, 3).astype(np.float64)
    out = np.zeros((flat.shape[0], 4), np.uint8)
    maxc = flat.max(axis=1)
    nz = maxc >= 1e-38
    if nz.any():
        vals = flat[nz]
        _, exp = np.frexp(maxc[nz])  # maxc = m * 2^exp, m in [0.5, 1)
        mant = np.round(np.ldexp(vals, (8 - exp)[:, None]))
        # rounding can push the max channel to 256; bump the exponent
        over = mant.max(axis=1) > 255
        if over.any():
            exp[over] += 1
            mant[over] = np.round(np.ldexp(vals[over], (8 - exp[over])[:, None]))
        np.clip(mant, 0, 255, out=mant)
        e8 = np.clip(exp + 128, 0, 255)
        sub = np.zeros((vals.shape[0], 4), np.uint8)
        sub[:, :3] = mant.astype(np.uint8)
        sub[:, 3] = e8.astype(np.uint8)
        sub[e8 == 0] = 0
        out[nz] = sub
    return out.reshape(rgb.shape[:-1] + (4,))


def _parse_header(data: bytes):
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise FormatError("missing #?RADIANCE signature")
    pos = data.find(b"\n") + 1
    # header lines until the blank separator
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("unterminated header")
        line = data[pos:end]
        pos = end + 1
        if line == b"":
            break
    end = data.find(b"\n", pos)
    if end < 0:
        raise FormatError("missing resolution line")
    parts = data[pos:end].split()
    if len(parts) != 4:
        raise FormatError(f"bad resolution line: {data[pos:end]!r}")
    if parts[0] != b"-Y" or parts[2] != b"+X":
        raise UnsupportedError(f"unsupported orientation: {data[pos:end]!r}")
    try:
        height, width = int(parts[1]), int(parts[3])
    except ValueError as exc:
        raise FormatError("non-numeric resolution") from exc
    if height <= 0 or width <= 0:
        raise FormatError("non-positive resolution")
    return width, height, end + 1


def _read_rle_scanline(data: bytes, pos: int, width: int, row: np.ndarray) -> int:
    # four component streams (R, G, B, E), each run-length coded
    for c in range(4):
        x = 0
        while x < width:
            if pos >= len(data):
                raise TruncationError("scanline ended early")
            code = data[pos]
            pos += 1
            if code > 128:  # run of one repeated byte
                count = code - 128
                if pos >= len(data):
                    raise TruncationError("run value missing")
                if x + count > width:
                    raise FormatError("run overflows scanline")
                row[x:x + count, c] = data[pos]
                pos += 1
            else:  # literal bytes
                count = code
                if count == 0:
                    raise FormatError("zero-length literal")
                if x + count > width:
                    raise FormatError("literal overflows scanline")
                if pos + count > len(data):
                    raise TruncationError("literal bytes missing")
                row[x:x + count, c] = np.frombuffer(data[pos:pos + count], np.uint8)
                pos += count
            x += count
    return pos


def read_radiance_hdr(data: bytes) -> HdrImage:
    """Decode a Radiance RGBE (.hdr) file."""
    width, height, pos = _parse_header(data)
    rgbe = np.empty((height, width, 4), np.uint8)
    row = np.empty((width, 4), np.uint8)
    for y in range(height):
        use_rle = False
        if 8 <= width <= 0x7FFF and pos + 4 <= len(data):
            b0, b1, b2, b3 = data[pos:pos + 4]
            if b0 == 2 and b1 == 2 and (b2 << 8) + b3 == width:
                use_rle = True
        if use_rle:
            pos = _read_rle_scanline(data, pos + 4, width, row)
            rgbe[y] = row
        else:
            need = width * 4
            if pos + need > len(data):
                raise TruncationError(f"flat scanline {y} truncated")
            rgbe[y] = np.frombuffer(data[pos:pos + need], np.uint8).reshape(width, 4)
            pos += need
    return HdrImage(rgbe_decode(rgbe))


def _write_rle_component(vals: np.ndarray, out: bytearray):
    # Radiance RLE: codes > 128 are runs of one byte, codes <= 128 literal
    # chunks. Constant rows (common: black background) become runs; anything
    # else is emitted as literal chunks, which keeps encoding vectorized.
    n = len(vals)
    if n and vals.min() == vals.max():
        v = int(vals[0])
        x = 0
        while x < n:
            c = min(127, n - x)
            out.append(128 + c)
            out.append(v)
            x += c
    else:
        for x in range(0, n, 128):
            chunk = vals[x:x + 128]
            out.append(len(chunk))
            out.extend(chunk.tobytes())


def write_radiance_hdr(img: HdrImage) -> bytes:
    """Encode as Radiance RGBE; re-readable by read_radiance_hdr."""
    img.validate()
    h, w = img.height, img.width
    rgbe = rgbe_encode(img.pixels)
    out = bytearray()
    out.extend(b"#?RADIANCE\n")
    out.extend(b"FORMAT=32-bit_rle_rgbe\n")
    out.extend(b"\n")
    out.extend(f"-Y {h} +X {w}\n".encode())
    if 8 <= w <= 0x7FFF:
        for y in range(h):
            out.extend(bytes((2, 2, w >> 8, w & 0xFF)))
            for c in range(4):
                _write_rle_component(rgbe[y, :, c], out)
    else:
        out.extend(rgbe.tobytes())
    return bytes(out)


def tonemap(img, exposure: float = 1.0, gamma: float = 2.2) -> LdrImage:
    """Exposure-scale, clamp to [0,1], gamma-encode, quantize to 8 bits."""
    if exposure <= 0:
        raise ValueError(f"exposure must be positive, got {exposure}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    px = _as_pixels(img).astype(np.float64)
    mapped = np.clip(px * exposure, 0.0, 1.0) ** (1.0 / gamma)
    return LdrImage(np.round(255.0 * mapped).astype(np.uint8))


_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def write_png(img: LdrImage, compress_level: int = 6) -> bytes:
    """Encode an 8-bit RGB PNG (filter 0 on every row, no alpha)."""
    px = img.pixels
    h, w = px.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = bytearray()
    for y in range(h):
        raw.append(0)
        raw.extend(px[y].tobytes())
    idat = zlib.compress(bytes(raw), compress_level)
    return b"".join([
        _PNG_SIG,
        _png_chunk(b"IHDR", ihdr),
        _png_chunk(b"IDAT", idat),
        _png_chunk(b"IEND", b""),
    ])
