"""Slice rendering to 8-bit binary PGM (P5)."""

from __future__ import annotations

import os

import numpy as np

from .errors import ShapeError


def take_slice(volume, axis: int, index="middle") -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ShapeError(f"expected a 3-D volume, got shape {v.shape}")
    if axis not in (0, 1, 2):
        raise ShapeError(f"axis must be 0, 1 or 2, got {axis}")
    n = v.shape[axis]
    idx = n // 2 if index == "middle" else int(index)
    if not 0 <= idx < n:
        raise ShapeError(f"slice index {idx} out of range [0, {n}) on axis {axis}")
    return np.take(v, idx, axis=axis)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255, rounding half up; a flat image is all 0."""
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.floor((img - lo) / (hi - lo) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def to_signed_gray(img: np.ndarray) -> np.ndarray:
    """Symmetric scale: -max|v| -> 0, 0 -> 128, +max|v| -> 255."""
    m = float(np.abs(img).max())
    if m == 0.0:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.clip(np.floor(127.5 + img / m * 127.5 + 0.5), 0, 255).astype(np.uint8)


def encode_pgm(pixels: np.ndarray, comment: str | None = None) -> bytes:
    """P5 image; ``comment`` becomes one ``#`` header line (ASCII, no newlines)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    rows, cols = pixels.shape
    head = "P5\n"
    if comment is not None:
        if "\n" in comment or "\r" in comment:
            raise ValueError("PGM comment must be a single line")
        head += f"# {comment}\n"
    head += f"{cols} {rows}\n255\n"
    return head.encode("ascii") + pixels.tobytes(order="C")


def decode_pgm(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pgm`; header comments are skipped."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace() and data[end : end + 1] != b"#":
            end += 1
        if end == pos:
            raise ValueError("truncated PGM header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    cols, rows = int(fields[1]), int(fields[2])
    body = data[pos + 1 :]
    if len(body) != rows * cols:
        raise ValueError(f"PGM payload is {len(body)} bytes, expected {rows * cols}")
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)


def render_slice(volume, axis: int, index="middle", path=None, signed: bool = False, comment: str | None = None) -> np.ndarray:
    """Render one slice; writes a PGM when ``path`` is given."""
    img = take_slice(volume, axis, index)
    pixels = to_signed_gray(img) if signed else to_gray(img)
    if path is not None:
        with open(os.fspath(path), "wb") as fh:
            fh.write(encode_pgm(pixels, comment))
    return pixels
