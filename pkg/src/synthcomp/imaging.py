"""Small raster helpers shared by the stub backend, extraction and I/O."""

from __future__ import annotations

import base64
import hashlib
import io

import numpy as np
from PIL import Image

COLOR_NAMES = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
    "red": (200, 30, 30),
    "green": (40, 160, 40),
    "blue": (30, 60, 200),
    "yellow": (230, 220, 40),
    "orange": (240, 140, 20),
    "purple": (130, 40, 160),
    "brown": (120, 80, 40),
    "pink": (240, 150, 190),
    "cyan": (40, 200, 210),
}


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels)).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def decode_png(data: bytes, mode: str = "RGB") -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert(mode)).copy()


def png_b64(pixels: np.ndarray) -> str:
    return base64.b64encode(encode_png(pixels)).decode("ascii")


def from_png_b64(text: str, mode: str = "RGB") -> np.ndarray:
    return decode_png(base64.b64decode(text), mode)


def load_image(path, mode: str = "RGB") -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode)).copy()


def pixel_digest(pixels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(repr((pixels.shape, str(pixels.dtype))).encode())
    h.update(np.ascontiguousarray(pixels).tobytes())
    return h.hexdigest()


def border_ring(pixels: np.ndarray, width: int = 2) -> np.ndarray:
    """Pixels of the ``width``-pixel frame as an (n, C) array."""
    h, w = pixels.shape[:2]
    ring = np.zeros((h, w), dtype=bool)
    ring[:width, :] = True
    ring[-width:, :] = True
    ring[:, :width] = True
    ring[:, -width:] = True
    return pixels[ring]


def dominant_border_color(pixels: np.ndarray, width: int = 2, buckets: int = 16) -> tuple[float, float, float]:
    """Mean color of the most populated quantized bucket on the border ring.

    Ties go to the bucket with the smallest packed index.
    """
    ring = border_ring(pixels[..., :3], width).astype(np.int64)
    step = 256 // buckets
    q = ring // step
    packed = (q[:, 0] * buckets + q[:, 1]) * buckets + q[:, 2]
    counts = np.bincount(packed, minlength=buckets**3)
    winner = int(np.argmax(counts))
    members = ring[packed == winner]
    return tuple(float(v) for v in members.mean(axis=0))


def nearest_color_name(rgb) -> str:
    rgb = np.asarray(rgb, dtype=float)
    return min(COLOR_NAMES, key=lambda name: float(np.sum((rgb - COLOR_NAMES[name]) ** 2)))


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight ``(x, y, w, h)`` of set pixels, or None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
