"""Value-semantic float image buffers and 8-bit PNG round-tripping."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageError(ValueError):
    """Raised when an image buffer violates its invariants."""


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major float image with intensities in [0, 1].

    data has shape (height, width, channels), channels 1 (gray) or 3 (RGB),
    dtype float32. Instances are never mutated by filters; every operation
    returns a new buffer.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageError(f"expected (H, W, 1|3) data, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", np.ascontiguousarray(arr, dtype=np.float32))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        """Luminance plane (H, W) via 0.299/0.587/0.114 weights."""
        if self.channels == 1:
            return self.data[:, :, 0]
        r, g, b = self.data[:, :, 0], self.data[:, :, 1], self.data[:, :, 2]
        return 0.299 * r + 0.587 * g + 0.114 * b

    def content_hash(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()


def clamp01(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0)


def save_png(img: ImageBuffer, path: str | Path) -> None:
    """Quantize to 8 bits (round) and write a PNG."""
    q = np.round(img.data * 255.0).astype(np.uint8)
    if img.channels == 1:
        pil = Image.fromarray(q[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(q, mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def load_png(path: str | Path) -> ImageBuffer:
    """Read a PNG and dequantize by /255."""
    with Image.open(path) as pil:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.float32) / 255.0
    return ImageBuffer(arr)


def png_bytes(img: ImageBuffer) -> bytes:
    import io

    q = np.round(img.data * 255.0).astype(np.uint8)
    pil = Image.fromarray(q[:, :, 0], mode="L") if img.channels == 1 else Image.fromarray(q, mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(raw: bytes) -> ImageBuffer:
    import io

    with Image.open(io.BytesIO(raw)) as pil:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.float32) / 255.0
    return ImageBuffer(arr)
