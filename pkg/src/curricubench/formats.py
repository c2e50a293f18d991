"""On-disk formats: binary PGM (P5), grayscale PNG, lung masks and F32G grids."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ImageReadError, MaskError

F32G_MAGIC = b"F32G"


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping ``#`` comments.

    Returns the integers and the offset of the single whitespace byte that
    terminates the last one.
    """
    values: list[int] = []
    pos = 2
    n = len(buf)
    while len(values) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        values.append(int(buf[start:pos]))
    return values, pos


def decode_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    (width, height, maxval), pos = _pgm_tokens(buf, 3)
    if not 0 < maxval <= 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    data = buf[pos + 1 : pos + 1 + width * height]
    if len(data) != width * height:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("PGM pixels must be a 2-D uint8 array")
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode() + np.ascontiguousarray(pixels).tobytes()


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_pgm(path.read_bytes())
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def read_image(path: str | Path) -> np.ndarray:
    """Read a grayscale PGM or PNG as a uint8 array."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        try:
            with Image.open(path) as img:
                if img.mode not in ("L", "I;16", "I", "P", "1"):
                    raise ValueError(f"PNG is not grayscale (mode {img.mode})")
                return np.asarray(img.convert("L"), dtype=np.uint8).copy()
        except (OSError, ValueError) as exc:
            raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return read_pgm(path)


def read_mask(path: str | Path) -> np.ndarray:
    """Read a {0,255} PGM mask and return it as a {0,1} uint8 array."""
    pixels = read_pgm(path)
    if not np.isin(pixels, (0, 255)).all():
        raise MaskError(f"mask {path} has values other than 0 and 255")
    return (pixels == 255).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise MaskError("mask values must be 0 or 1")
    write_pgm(path, (mask.astype(np.uint8) * 255))


def encode_f32g(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise ValueError("F32G grids are 2-D")
    rows, cols = grid.shape
    return F32G_MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(grid).tobytes()


def decode_f32g(buf: bytes) -> np.ndarray:
    if buf[:4] != F32G_MAGIC:
        raise FormatError("missing F32G magic")
    rows, cols = struct.unpack("<II", buf[4:12])
    body = buf[12:]
    if len(body) != 4 * rows * cols:
        raise FormatError(f"F32G body has {len(body)} bytes, expected {4 * rows * cols}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_f32g(path: str | Path, grid: np.ndarray) -> None:
    Path(path).write_bytes(encode_f32g(grid))


def read_f32g(path: str | Path) -> np.ndarray:
    return decode_f32g(Path(path).read_bytes())


def write_grid_csv(path: str | Path, grid: np.ndarray) -> None:
    """Write a 2-D grid as CSV with 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(grid):
            fh.write(",".join(f"{float(v):.9g}" for v in row) + "\n")
