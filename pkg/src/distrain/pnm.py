"""Binary portable graymap/pixmap (P5/P6, 8-bit) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def _read_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return offset of pixel data."""
    magic = data[:2]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # skip whitespace and '#' comment lines between header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise DataError(f"malformed header in {path}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    return magic, width, height, maxval, pos


def read_pnm(path) -> np.ndarray:
    """Read a P5 graymap as (H,W) or a P6 pixmap as (H,W,3), uint8."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"unreadable file: {path}") from exc
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise DataError(f"not a binary P5/P6 file: {path}")
    magic, width, height, maxval, pos = _read_header(data, path)
    if maxval != 255:
        raise DataError(f"only 8-bit maxval 255 supported, got {maxval} in {path}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise DataError(f"truncated pixel data in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write (H,W) uint8 as binary P5."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise DataError(f"P5 output needs a 2-D array, got shape {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write (H,W,3) uint8 as binary P6."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"P6 output needs (H,W,3), got shape {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
