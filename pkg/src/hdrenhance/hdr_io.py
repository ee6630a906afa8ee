"""Image file codecs: Radiance RGBE (.hdr), PFM and binary PPM.

Images travel through the package as ``float32`` numpy arrays shaped
``(height, width, 3)``. HDR rasters hold non-negative linear radiance, LDR
rasters hold display values in ``[0, 1]``.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

HDR_SUFFIXES = (".hdr", ".pic", ".rgbe")

_RLE_MIN_WIDTH = 8
_RLE_MAX_WIDTH = 0x7FFF
_MIN_RUN = 4
_RESOLUTION_RE = re.compile(rb"^([-+])Y\s+(\d+)\s+([-+])X\s+(\d+)\s*$")


class ImageFormatError(ValueError):
    """A file could not be decoded; ``offset`` is the byte position, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def check_hdr(img, name="HDR image"):
    """Validate an HDR raster and return it as float32."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (height, width, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1, got {img.shape[1]}x{img.shape[0]}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(img < 0):
        raise ValueError(f"{name} contains negative values")
    return img.astype(np.float32, copy=False)


def check_ldr(img, name="LDR image"):
    """Validate an LDR raster (components in [0, 1]) and return it as float32."""
    img = check_hdr(img, name)
    if np.any(img > 1):
        raise ValueError(f"{name} has components above 1")
    return img


# --------------------------------------------------------------------------
# RGBE pixel conversion


def decode_rgbe(rgbe):
    """Decode ``(..., 4)`` uint8 RGBE quads to float32 RGB.

    Each component is ``mantissa * 2**(e - 136)``; ``e == 0`` is exact zero.
    """
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int32)
    scale = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return (rgbe[..., :3].astype(np.float64) * scale[..., None]).astype(np.float32)


def encode_rgbe(rgb):
    """Encode ``(..., 3)`` non-negative RGB to uint8 RGBE quads.

    Mantissas are truncated, as in the Radiance reference encoder. Values
    below the normal range keep exponent byte 1 with a small mantissa
    instead of flushing to zero, so every decodable quad re-encodes to a
    quad with the same value.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    vmax = rgb.max(axis=-1)
    _, exp = np.frexp(vmax)
    exp = np.maximum(exp, -127)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    live = vmax > 0
    if np.any(exp[live] + 128 > 255):
        raise ValueError("value too large for RGBE encoding")
    scale = np.ldexp(1.0, 8 - exp[live])
    mant = np.floor(rgb[live] * scale[:, None])
    out[live, :3] = np.clip(mant, 0, 255).astype(np.uint8)
    out[live, 3] = (exp[live] + 128).astype(np.uint8)
    out[np.all(out[..., :3] == 0, axis=-1)] = 0
    return out


# --------------------------------------------------------------------------
# Radiance .hdr


def _read_header(data):
    """Parse the text header; returns (variables, body offset, height, width, flip_rows)."""
    end = data.find(b"\n")
    if end < 0:
        raise ImageFormatError("missing Radiance signature line", 0)
    signature = data[:end].strip()
    if signature not in (b"#?RADIANCE", b"#?RGBE"):
        raise ImageFormatError(f"malformed Radiance signature {signature[:32]!r}", 0)
    pos = end + 1
    variables = {}
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise ImageFormatError("header not terminated by a blank line", pos)
        line = data[pos:end].strip()
        if not line:
            pos = end + 1
            break
        if not line.startswith(b"#") and b"=" in line:
            key, value = line.split(b"=", 1)
            variables[key.decode("ascii", "replace").strip()] = value.decode("ascii", "replace").strip()
        pos = end + 1
    fmt = variables.get("FORMAT", "32-bit_rle_rgbe")
    if fmt != "32-bit_rle_rgbe":
        raise ImageFormatError(f"unsupported FORMAT {fmt!r}; only 32-bit_rle_rgbe is read", 0)
    # EXPOSURE and friends are parsed above but the data stays relative radiance.
    end = data.find(b"\n", pos)
    if end < 0:
        raise ImageFormatError("missing resolution line", pos)
    match = _RESOLUTION_RE.match(data[pos:end].strip())
    if match is None:
        raise ImageFormatError(f"unsupported resolution line {data[pos:end][:40]!r}", pos)
    ysign, height, xsign, width = match.groups()
    if xsign != b"+":
        raise ImageFormatError("only +X scan direction is supported", pos)
    height, width = int(height), int(width)
    if height < 1 or width < 1:
        raise ImageFormatError("image dimensions must be positive", pos)
    return variables, end + 1, height, width, ysign == b"+"


def _read_rle_scanline(data, pos, width):
    """Decode one new-style RLE scanline starting after its 4-byte marker."""
    line = np.empty((4, width), dtype=np.uint8)
    n = len(data)
    for comp in range(4):
        col = 0
        row = line[comp]
        while col < width:
            if pos >= n:
                raise ImageFormatError("truncated scanline", pos)
            count = data[pos]
            if count > 128:
                count -= 128
                if col + count > width:
                    raise ImageFormatError(
                        f"RLE run of {count} overruns scanline ({width - col} left)", pos
                    )
                if pos + 1 >= n:
                    raise ImageFormatError("truncated scanline", pos + 1)
                row[col:col + count] = data[pos + 1]
                pos += 2
            else:
                if count == 0:
                    raise ImageFormatError("zero-length RLE literal", pos)
                if col + count > width:
                    raise ImageFormatError(
                        f"RLE literal of {count} overruns scanline ({width - col} left)", pos
                    )
                if pos + 1 + count > n:
                    raise ImageFormatError("truncated scanline", n)
                row[col:col + count] = np.frombuffer(data, np.uint8, count, pos + 1)
                pos += 1 + count
            col += count
    return line.T, pos


def read_radiance_hdr(data):
    """Decode a Radiance RGBE byte string to a ``(h, w, 3)`` float32 array."""
    data = bytes(data)
    _, pos, height, width, flip_rows = _read_header(data)
    pixels = np.empty((height, width, 4), dtype=np.uint8)
    n = len(data)
    rle_ok = _RLE_MIN_WIDTH <= width <= _RLE_MAX_WIDTH
    for y in range(height):
        if (
            rle_ok
            and pos + 4 <= n
            and data[pos] == 2
            and data[pos + 1] == 2
            and data[pos + 2] < 128
        ):
            if (data[pos + 2] << 8 | data[pos + 3]) != width:
                raise ImageFormatError("RLE scanline width does not match header", pos)
            pixels[y], pos = _read_rle_scanline(data, pos + 4, width)
        else:
            if pos + 4 * width > n:
                raise ImageFormatError("truncated scanline", n)
            pixels[y] = np.frombuffer(data, np.uint8, 4 * width, pos).reshape(width, 4)
            pos += 4 * width
    if flip_rows:
        pixels = pixels[::-1]
    return decode_rgbe(pixels)


def _rle_encode_component(values):
    """Run-length encode one component of a scanline (Radiance scheme)."""
    out = bytearray()
    n = len(values)
    cur = 0
    while cur < n:
        beg = cur
        run = old_run = 0
        while run < _MIN_RUN and beg < n:
            beg += run
            old_run = run
            run = 1
            while beg + run < n and run < 127 and values[beg] == values[beg + run]:
                run += 1
        # short run right before a long one
        if old_run > 1 and old_run == beg - cur:
            out += bytes((128 + old_run, values[cur]))
            cur = beg
        while cur < beg:
            count = min(128, beg - cur)
            out.append(count)
            out += bytes(values[cur:cur + count])
            cur += count
        if run >= _MIN_RUN:
            out += bytes((128 + run, values[beg]))
            cur += run
    return bytes(out)


def write_radiance_hdr(img):
    """Encode an HDR raster as Radiance RGBE bytes (RLE when the width allows)."""
    img = check_hdr(img)
    height, width = img.shape[:2]
    quads = encode_rgbe(img)
    out = bytearray(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
    out += f"-Y {height} +X {width}\n".encode("ascii")
    if not _RLE_MIN_WIDTH <= width <= _RLE_MAX_WIDTH:
        out += quads.tobytes()
        return bytes(out)
    marker = bytes((2, 2, width >> 8, width & 0xFF))
    for y in range(height):
        out += marker
        for comp in range(4):
            out += _rle_encode_component(quads[y, :, comp].tobytes())
    return bytes(out)


# --------------------------------------------------------------------------
# PFM


def _next_token(data, pos):
    while pos < len(data) and data[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", pos)
    return data[start:pos], pos


def read_pfm(data, allow_any=False):
    """Decode a colour ``PF`` file. Rows are stored bottom-to-top.

    Negative or non-finite samples are rejected unless ``allow_any``.
    """
    data = bytes(data)
    magic, pos = _next_token(data, 0)
    if magic == b"Pf":
        raise ImageFormatError("grayscale PFM ('Pf') is not supported; expected 'PF'", 0)
    if magic != b"PF":
        raise ImageFormatError(f"not a PFM file (magic {magic[:8]!r})", 0)
    try:
        w_tok, pos = _next_token(data, pos)
        h_tok, pos = _next_token(data, pos)
        s_tok, pos = _next_token(data, pos)
        width, height, scale = int(w_tok), int(h_tok), float(s_tok)
    except ValueError as exc:
        raise ImageFormatError(f"bad PFM header: {exc}", pos) from None
    if width < 1 or height < 1:
        raise ImageFormatError("PFM dimensions must be positive", pos)
    if scale == 0:
        raise ImageFormatError("PFM scale must be non-zero", pos)
    pos += 1  # single whitespace byte after the scale
    count = width * height * 3
    if len(data) - pos < 4 * count:
        raise ImageFormatError("truncated PFM raster", len(data))
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    img = np.frombuffer(data, dtype, count, pos).reshape(height, width, 3)[::-1]
    img = img.astype(np.float32)
    if not allow_any:
        if not np.all(np.isfinite(img)):
            raise ImageFormatError("PFM contains non-finite samples")
        if np.any(img < 0):
            raise ImageFormatError("PFM contains negative samples")
    return img


def write_pfm(img, byteorder="<"):
    """Encode a raster as ``PF`` bytes; ``byteorder`` is ``'<'`` or ``'>'``."""
    img = check_hdr(img)
    if byteorder not in ("<", ">"):
        raise ValueError("byteorder must be '<' or '>'")
    height, width = img.shape[:2]
    scale = "-1.0" if byteorder == "<" else "1.0"
    header = f"PF\n{width} {height}\n{scale}\n".encode("ascii")
    body = np.ascontiguousarray(img[::-1], dtype=np.dtype(byteorder + "f4"))
    return header + body.tobytes()


# --------------------------------------------------------------------------
# PPM


def quantize_8bit(img):
    """Round [0, 1] components to bytes, halves away from zero."""
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_ldr_ppm(img):
    """Encode an LDR raster as binary P6 with maxval 255."""
    img = check_ldr(img)
    height, width = img.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + quantize_8bit(img).tobytes()


def read_ppm(data):
    """Decode binary P6 (maxval up to 65535) to float32 in [0, 1]."""
    data = bytes(data)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ImageFormatError("unterminated PPM comment")
            continue
        tok, pos = _next_token(data, pos)
        tokens.append(tok)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {tokens[0][:8]!r})", 0)
    width, height, maxval = (int(t) for t in tokens[1:])
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError("bad PPM header", pos)
    pos += 1
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = width * height * 3
    if len(data) - pos < count * dtype.itemsize:
        raise ImageFormatError("truncated PPM raster", len(data))
    raw = np.frombuffer(data, dtype, count, pos).reshape(height, width, 3)
    return (raw.astype(np.float64) / maxval).astype(np.float32)


# --------------------------------------------------------------------------
# Path helpers


def load_hdr(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in HDR_SUFFIXES:
        return read_radiance_hdr(path.read_bytes())
    if suffix == ".pfm":
        return read_pfm(path.read_bytes())
    raise ValueError(f"unrecognised HDR file type: {path.name}")


def save_hdr(path, img):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in HDR_SUFFIXES:
        path.write_bytes(write_radiance_hdr(img))
    elif suffix == ".pfm":
        path.write_bytes(write_pfm(img))
    else:
        raise ValueError(f"unrecognised HDR file type: {path.name}")


def load_ldr(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        return read_ppm(path.read_bytes())
    if suffix == ".pfm":
        return check_ldr(read_pfm(path.read_bytes()), str(path))
    raise ValueError(f"unrecognised LDR file type: {path.name}")


def save_ldr(path, img):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        path.write_bytes(write_ldr_ppm(img))
    elif suffix == ".pfm":
        path.write_bytes(write_pfm(check_ldr(img)))
    else:
        raise ValueError(f"unrecognised LDR file type: {path.name}")
