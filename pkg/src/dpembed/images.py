"""Image file output: binary PPM/PGM and a minimal grayscale PNG writer.

Grid composites are written as binary P5 (grayscale) or P6 (color); PNG
output is a single 8-bit grayscale IDAT chunk compressed with zlib, enough
for viewing results without any imaging dependency.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .diffusion import ImageTensor


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Map [-1, 1] float pixels to uint8, clipping out-of-range values."""
    scaled = (np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5
    return np.rint(scaled).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 grayscale image from a (H, W) uint8 array."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError("P5 output needs a (H, W) array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 color image from a (H, W, 3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("P6 output needs a (H, W, 3) array")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _png_chunk(fh, kind: bytes, payload: bytes) -> None:
    fh.write(struct.pack(">I", len(payload)))
    fh.write(kind)
    fh.write(payload)
    fh.write(struct.pack(">I", zlib.crc32(kind + payload)))


def write_png(path, gray: np.ndarray) -> None:
    """8-bit grayscale PNG from a (H, W) uint8 array."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError("PNG output needs a (H, W) array")
    height, width = gray.shape
    raw = b"".join(b"\x00" + row.tobytes() for row in gray)
    with open(path, "wb") as fh:
        fh.write(bytes([137, 80, 78, 71, 13, 10, 26, 10]))
        _png_chunk(fh, b"IHDR", struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0))
        _png_chunk(fh, b"IDAT", zlib.compress(raw, 9))
        _png_chunk(fh, b"IEND", b"")


def write_image(path, image: ImageTensor) -> None:
    """Write one image, choosing the format from the file extension."""
    gray = to_uint8(image.grid())
    name = str(path)
    if name.endswith(".png"):
        write_png(path, gray)
    elif name.endswith(".ppm"):
        write_ppm(path, np.repeat(gray[:, :, None], 3, axis=2))
    else:
        write_pgm(path, gray)


def compose_grid(
    rows, scale: int = 4, pad: int = 2, pad_value: float = 1.0
) -> np.ndarray:
    """Tile images into a (rows x cols) uint8 grid.

    `rows` is a list of lists of ImageTensor or None (blank cell); every
    image is nearest-neighbour upscaled by `scale` and separated by `pad`
    pixels of `pad_value` (in [-1, 1] units).
    """
    if not rows or not rows[0]:
        raise ValueError("grid must have at least one row and column")
    n_cols = max(len(r) for r in rows)
    first = next(im for r in rows for im in r if im is not None)
    cell_h, cell_w = first.height * scale, first.width * scale
    grid_h = len(rows) * cell_h + (len(rows) + 1) * pad
    grid_w = n_cols * cell_w + (n_cols + 1) * pad
    canvas = np.full((grid_h, grid_w), to_uint8(np.array([pad_value]))[0], np.uint8)
    for i, row in enumerate(rows):
        for j, image in enumerate(row):
            if image is None:
                continue
            tile = to_uint8(image.grid())
            tile = np.repeat(np.repeat(tile, scale, axis=0), scale, axis=1)
            y0 = pad + i * (cell_h + pad)
            x0 = pad + j * (cell_w + pad)
            canvas[y0 : y0 + cell_h, x0 : x0 + cell_w] = tile
    return canvas
