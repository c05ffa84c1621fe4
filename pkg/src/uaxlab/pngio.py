"""Tiny PNG codec over zlib + struct.

Writes 8- or 16-bit grayscale/RGB images with filter type 0 on every row;
reads the same plus filter types 1-4 so files from other writers round-trip.
Interlaced, paletted, and alpha images are out of scope and rejected.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["PngError", "write_png", "read_png"]

_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# color type -> channel count (only the ones we accept)
_CHANNELS = {0: 1, 2: 3}


class PngError(ValueError):
    """Malformed or unsupported PNG data."""


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload))
    )


def write_png(path, image: np.ndarray, bit_depth: int = 8) -> None:
    """Write an (H, W) or (H, W, 3) uint array as a PNG file.

    ``image`` must already be integer-valued within the bit depth's range;
    dtype uint8 for depth 8, uint16 for depth 16.
    """
    if bit_depth not in (8, 16):
        raise PngError(f"bit_depth must be 8 or 16, got {bit_depth}")
    want = np.uint8 if bit_depth == 8 else np.uint16
    if image.dtype != want:
        raise PngError(f"image dtype {image.dtype} does not match bit depth {bit_depth}")
    if image.ndim == 2:
        color = 0
    elif image.ndim == 3 and image.shape[2] == 3:
        color = 2
    else:
        raise PngError(f"image must be (H, W) or (H, W, 3), got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise PngError("image has an empty axis")

    rows = image.reshape(h, -1)
    if bit_depth == 16:
        rows = rows.astype(">u2")
    raw = bytearray()
    for r in range(h):
        raw.append(0)  # filter type 0 (None)
        raw += rows[r].tobytes()

    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color, 0, 0, 0)
    blob = _SIGNATURE
    blob += _chunk(b"IHDR", ihdr)
    blob += _chunk(b"IDAT", zlib.compress(bytes(raw), 9))
    blob += _chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(blob)


def _unfilter(raw: bytes, h: int, w: int, channels: int, bytes_per_sample: int) -> bytearray:
    bpp = channels * bytes_per_sample  # filter unit, per the PNG spec
    stride = w * bpp
    out = bytearray(h * stride)
    pos = 0
    for r in range(h):
        if pos >= len(raw):
            raise PngError("decompressed data ended early")
        ftype = raw[pos]
        pos += 1
        line = bytearray(raw[pos : pos + stride])
        if len(line) != stride:
            raise PngError("decompressed data ended early")
        pos += stride
        prev_start = (r - 1) * stride
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            if r > 0:
                for i in range(stride):
                    line[i] = (line[i] + out[prev_start + i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                up = out[prev_start + i] if r > 0 else 0
                line[i] = (line[i] + ((left + up) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                b = out[prev_start + i] if r > 0 else 0
                c = out[prev_start + i - bpp] if (r > 0 and i >= bpp) else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                line[i] = (line[i] + pred) & 0xFF
        else:
            raise PngError(f"unsupported filter type {ftype}")
        out[r * stride : (r + 1) * stride] = line
    if pos != len(raw):
        raise PngError("trailing bytes after final scanline")
    return out


def read_png(path) -> np.ndarray:
    """Read a PNG file into a uint8 or uint16 array.

    Shape is (H, W) for grayscale or (H, W, 3) for RGB; the dtype carries
    the bit depth.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SIGNATURE:
        raise PngError("not a PNG file (bad signature)")

    pos = 8
    ihdr = None
    idat = bytearray()
    seen_end = False
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise PngError("truncated chunk header")
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if len(payload) != length:
            raise PngError("truncated chunk payload")
        (crc,) = struct.unpack(">I", blob[pos + 8 + length : pos + 12 + length])
        if crc != zlib.crc32(tag + payload):
            raise PngError(f"bad CRC in {tag!r} chunk")
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = payload
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            seen_end = True
            break
        # ancillary chunks are skipped
    if ihdr is None or not seen_end:
        raise PngError("missing IHDR or IEND chunk")

    w, h, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", ihdr)
    if comp != 0 or filt != 0:
        raise PngError("unsupported compression or filter method")
    if interlace != 0:
        raise PngError("interlaced PNGs are not supported")
    if color not in _CHANNELS:
        raise PngError(f"unsupported color type {color} (grayscale and RGB only)")
    if depth not in (8, 16):
        raise PngError(f"unsupported bit depth {depth}")
    if w < 1 or h < 1:
        raise PngError("image has an empty axis")

    channels = _CHANNELS[color]
    bps = depth // 8
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise PngError(f"corrupt IDAT stream: {exc}") from None
    expect = h * (1 + w * channels * bps)
    if len(raw) != expect:
        raise PngError(f"decompressed size {len(raw)} != expected {expect}")
    flat = _unfilter(raw, h, w, channels, bps)

    dtype = ">u2" if depth == 16 else np.uint8
    arr = np.frombuffer(bytes(flat), dtype=dtype)
    arr = arr.astype(np.uint16) if depth == 16 else arr.copy()
    if channels == 1:
        arr = arr.reshape(h, w)
    else:
        arr = arr.reshape(h, w, 3)
    return arr
