"""8-bit grayscale image I/O (binary PGM and PNG) and resampling helpers.

Frames are plain ``numpy`` arrays of shape ``(height, width)`` and dtype
``uint8``; nothing here wraps them in a class.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = ["as_frame", "read_image", "write_image", "read_pgm", "write_pgm", "resize", "ImageFormatError"]


class ImageFormatError(ValueError):
    pass


def as_frame(data) -> np.ndarray:
    """Validate and return ``data`` as a 2-D uint8 frame."""
    arr = np.asarray(data)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a 2-D frame with positive size, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.integer) and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("integer frame values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise ImageFormatError(f"{path}: not a binary (P5) PGM file")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM supported (maxval={maxval})")
    body = raw[m.end():]
    if len(body) < width * height:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body[: width * height], dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str | Path, frame) -> None:
    frame = as_frame(frame)
    h, w = frame.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(frame).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Read a PGM or PNG file as a uint8 grayscale frame."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "RGB", "RGBA", "I;16", "I"):
                raise ImageFormatError(f"{path}: unsupported image mode {im.mode}")
            return np.array(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def write_image(path: str | Path, frame) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, frame)
        return
    from PIL import Image

    Image.fromarray(as_frame(frame), mode="L").save(path)


def resize(image, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a 2-D array to ``shape`` (rows, cols), float64 out.

    Pixel centres are aligned (the ``align_corners=False`` convention).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    oh, ow = shape
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, [yy, xx], order=1, mode="nearest")
