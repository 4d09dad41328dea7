"""
Binary PGM/PPM image grids (no codec dependencies).
"""

from typing import Optional, Tuple

import numpy as np

from gradleak.errors import DatasetFormatError, ShapeError

SEPARATOR = 2
SEPARATOR_VALUE = 255


def quantize(images: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to 8-bit."""
    return np.round(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def tile(images: np.ndarray, columns: Optional[int] = None) -> np.ndarray:
    """
    Lay out (N, C, H, W) images row-major on a canvas with 2-pixel separators.

    Returns:
        uint8 canvas of shape (rows*H + (rows-1)*2, cols*W + (cols-1)*2, C).
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise ShapeError(f"expected (N, 1|3, H, W) images, got {images.shape}")
    n, c, h, w = images.shape
    columns = n if columns is None else max(1, min(columns, n))
    rows = -(-n // columns)
    canvas = np.full((rows * h + (rows - 1) * SEPARATOR, columns * w + (columns - 1) * SEPARATOR, c),
                     SEPARATOR_VALUE, dtype=np.uint8)
    pixels = quantize(images).transpose(0, 2, 3, 1)
    for k in range(n):
        r, col = divmod(k, columns)
        top, left = r * (h + SEPARATOR), col * (w + SEPARATOR)
        canvas[top:top + h, left:left + w] = pixels[k]
    return canvas


def save_image_grid(images: np.ndarray, path: str, columns: Optional[int] = None) -> Tuple[int, int]:
    """
    Write images as a P5 (1 channel) or P6 (3 channels) file.

    Returns:
        (width, height) of the written image.
    """
    canvas = tile(images, columns)
    height, width, channels = canvas.shape
    magic = "P5" if channels == 1 else "P6"
    with open(path, "wb") as f:
        f.write(f"{magic}\n{width} {height}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())
    return width, height


def _header_tokens(data: bytes, count: int) -> Tuple[list, int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError("truncated PNM header")
        tokens.append(data[start:pos].decode("ascii"))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def load_pnm(path: str) -> np.ndarray:
    """Read a binary P5/P6 file into (H, W) or (H, W, 3) uint8."""
    with open(path, "rb") as f:
        data = f.read()
    (magic, width, height, maxval), offset = _header_tokens(data, 4)
    if magic not in ("P5", "P6") or maxval != "255":
        raise DatasetFormatError(f"{path}: unsupported PNM variant {magic} (maxval {maxval})")
    width, height = int(width), int(height)
    channels = 1 if magic == "P5" else 3
    if len(data) - offset < width * height * channels:
        raise DatasetFormatError(f"{path}: raster shorter than {width}x{height}x{channels}")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height * channels, offset=offset)
    return raster.reshape((height, width) if channels == 1 else (height, width, 3))
