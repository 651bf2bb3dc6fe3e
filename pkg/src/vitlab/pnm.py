"""Plain (ASCII) PPM/PGM image codec; binary (P5/P6) accepted on read.

Images move through the rest of the package as float arrays in [0, 1]:
PPM color images as (3, H, W), PGM graymaps as (H, W). Writing always
emits the plain ASCII form with maxval 255.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

__all__ = ["read_ppm", "write_ppm", "read_pgm", "write_pgm", "PnmError"]


class PnmError(ValueError):
    """Malformed PPM/PGM content."""


_COMMENT = re.compile(rb"#[^\n]*")


def _parse_header(raw: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Returns (magic, width, height, maxval, payload offset into raw)."""
    if len(raw) < 2 or raw[0:1] != b"P":
        raise PnmError(f"{path}: not a PNM file")
    magic = raw[0:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise PnmError(f"{path}: unsupported magic {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise PnmError(f"{path}: truncated header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            m = _COMMENT.match(raw, pos)
            pos = m.end()
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            m = re.compile(rb"\d+").match(raw, pos)
            fields.append(int(m.group()))
            pos = m.end()
        else:
            raise PnmError(f"{path}: unexpected byte {ch!r} in header")
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not (0 < maxval < 65536):
        raise PnmError(f"{path}: bad dimensions {width}x{height} maxval {maxval}")
    # binary formats: exactly one whitespace byte separates header and payload
    pos += 1 if magic in (b"P5", b"P6") else 0
    return magic, width, height, maxval, pos


def _read(path) -> tuple[bytes, int, int, int, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, width, height, maxval, pos = _parse_header(raw, path)
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P2", b"P3"):
        body = _COMMENT.sub(b" ", raw[pos:])
        try:
            values = np.array(body.split(), dtype=np.int64)
        except ValueError as exc:
            raise PnmError(f"{path}: non-numeric sample data") from exc
        if values.size != count:
            raise PnmError(f"{path}: expected {count} samples, found {values.size}")
    else:
        if maxval > 255:
            raise PnmError(f"{path}: 16-bit binary PNM not supported")
        payload = raw[pos:pos + count]
        if len(payload) != count:
            raise PnmError(f"{path}: payload truncated")
        values = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if values.min() < 0 or values.max() > maxval:
        raise PnmError(f"{path}: sample outside [0, {maxval}]")
    return magic, width, height, maxval, values


def read_ppm(path) -> np.ndarray:
    """Read a color PPM as float32 (3, H, W) scaled to [0, 1]."""
    magic, width, height, maxval, values = _read(path)
    if magic not in (b"P3", b"P6"):
        raise PnmError(f"{path}: not a PPM color image")
    img = values.reshape(height, width, 3).transpose(2, 0, 1)
    return (img / maxval).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    """Read a graymap PGM as float32 (H, W) scaled to [0, 1]."""
    magic, width, height, maxval, values = _read(path)
    if magic not in (b"P2", b"P5"):
        raise PnmError(f"{path}: not a PGM graymap")
    return (values.reshape(height, width) / maxval).astype(np.float32)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as plain PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise PnmError(f"write_ppm expects (3, H, W), got {img.shape}")
    q = _quantize(img).transpose(1, 2, 0)
    h, w, _ = q.shape
    lines = [f"P3\n{w} {h}\n255\n"]
    flat = q.reshape(-1)
    for start in range(0, flat.size, 12):
        lines.append(" ".join(map(str, flat[start:start + 12])) + "\n")
    Path(path).write_text("".join(lines))


def write_pgm(path, img: np.ndarray) -> None:
    """Write an (H, W) float (or bool mask) image in [0, 1] as plain PGM."""
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.float32)
    if img.ndim != 2:
        raise PnmError(f"write_pgm expects (H, W), got {img.shape}")
    q = _quantize(img)
    h, w = q.shape
    lines = [f"P2\n{w} {h}\n255\n"]
    flat = q.reshape(-1)
    for start in range(0, flat.size, 16):
        lines.append(" ".join(map(str, flat[start:start + 16])) + "\n")
    Path(path).write_text("".join(lines))
