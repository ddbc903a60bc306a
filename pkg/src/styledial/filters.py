"""Parametric stylization filters and edge-map extraction.

Each attribute filter maps (image, strength) -> image, is deterministic,
keeps outputs in [0, 1], and is the exact identity at strength 0. Strengths
are trained in [0, 1] but every filter accepts [0, 2] extrapolation.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .image import ImageBuffer, ImageError, clamp01

# Canonical attribute order; composition applies filters in this sequence so
# a strength map always produces the same stylization regardless of dict order.
KNOWN_ATTRIBUTES = (
    "blackpoint",
    "colorfulness",
    "depthPower",
    "details",
    "xdogSensitivity",
    "contourWidth",
)

# xDoG settings backing the contour/sensitivity overlays.
_CONTOUR_XDOG = {"sigma": 1.0, "k": 1.6, "tau": 0.98, "epsilon": 0.01, "phi": 15.0}


def _check_strength(strength: float) -> float:
    if not math.isfinite(strength) or strength < 0.0:
        raise ImageError(f"filter strength must be finite and >= 0, got {strength}")
    return float(strength)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian, truncated at 3*sigma."""
    if sigma <= 0:
        raise ImageError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D plane with reflect padding."""
    kernel = gaussian_kernel1d(sigma)
    radius = (len(kernel) - 1) // 2
    out = np.asarray(plane, dtype=np.float64)
    if radius >= out.shape[0] or radius >= out.shape[1]:
        raise ImageError(f"blur radius {radius} too large for shape {out.shape}")
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, w in enumerate(kernel):
            if axis == 0:
                acc += w * padded[i : i + out.shape[0], :]
            else:
                acc += w * padded[:, i : i + out.shape[1]]
        out = acc
    return out


def _blur_channels(data: np.ndarray, sigma: float) -> np.ndarray:
    return np.stack([gaussian_blur(data[:, :, c], sigma) for c in range(data.shape[2])], axis=2)


def xdog(
    img: ImageBuffer,
    sigma: float = 1.0,
    k: float = 1.6,
    tau: float = 0.98,
    epsilon: float = 0.01,
    phi: float = 10.0,
) -> ImageBuffer:
    """Thresholded extended difference-of-Gaussians stylization.

    u = G_sigma * I - tau * G_{k*sigma} * I, then 1 where u >= epsilon else
    1 + tanh(phi * (u - epsilon)), clamped to [0, 1]. RGB input is reduced to
    luminance first; output is single-channel with dark (low) line pixels.
    """
    if sigma <= 0:
        raise ImageError(f"xdog sigma must be > 0, got {sigma}")
    if k <= 1:
        raise ImageError(f"xdog k must be > 1, got {k}")
    gray = img.gray().astype(np.float64)
    u = gaussian_blur(gray, sigma) - tau * gaussian_blur(gray, k * sigma)
    soft = 1.0 + np.tanh(phi * (u - epsilon))
    out = np.where(u >= epsilon, 1.0, soft)
    return ImageBuffer(clamp01(out))


def blackpoint(img: ImageBuffer, strength: float) -> ImageBuffer:
    """Raise the black point: out = clamp((in - b) / (1 - b)) with b = 0.3*strength."""
    s = _check_strength(strength)
    b = 0.3 * s
    if b >= 1.0:
        raise ImageError(f"blackpoint strength {s} maps to degenerate level {b}")
    return ImageBuffer(clamp01((img.data - b) / (1.0 - b)))


def local_contrast(img: ImageBuffer, strength: float, sigma: float = 4.0) -> ImageBuffer:
    """Unsharp-mask contrast boost: out = clamp(I + s * (I - G_sigma * I))."""
    s = _check_strength(strength)
    blurred = _blur_channels(img.data.astype(np.float64), sigma)
    return ImageBuffer(clamp01(img.data + s * (img.data - blurred)))


def details(img: ImageBuffer, strength: float) -> ImageBuffer:
    """High-frequency boost; local_contrast with a 1-pixel Gaussian."""
    return local_contrast(img, strength, sigma=1.0)


def colorfulness(img: ImageBuffer, strength: float) -> ImageBuffer:
    """Scale chroma around the luminance axis by (1 + strength)."""
    s = _check_strength(strength)
    if s == 0.0 or img.channels == 1:
        return ImageBuffer(img.data.copy())
    y = img.gray()[:, :, None]
    return ImageBuffer(clamp01(y + (1.0 + s) * (img.data - y)))


def _dilate_max(plane: np.ndarray, radius: int) -> np.ndarray:
    """Grayscale dilation with a (2r+1)^2 square window; outside counts as 0."""
    if radius <= 0:
        return plane.copy()
    h, w = plane.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=plane.dtype)
    padded[radius : radius + h, radius : radius + w] = plane
    out = np.full_like(plane, -np.inf)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            np.maximum(out, padded[dy : dy + h, dx : dx + w], out=out)
    return out


def _edge_darkness(img: ImageBuffer, epsilon: float) -> np.ndarray:
    params = dict(_CONTOUR_XDOG, epsilon=epsilon)
    return 1.0 - xdog(img, **params).data[:, :, 0].astype(np.float64)


def contour_overlay(img: ImageBuffer, strength: float) -> ImageBuffer:
    """Darken outlines: multiply by a dilated xDoG line mask.

    The line mask is dilated by radius round(3*strength) and composited with
    opacity min(strength, 1), so strength 0 is the exact identity and larger
    strengths widen and darken the lines.
    """
    s = _check_strength(strength)
    opacity = min(s, 1.0)
    radius = int(round(3.0 * s))
    dark = _dilate_max(_edge_darkness(img, _CONTOUR_XDOG["epsilon"]), radius)
    mask = (1.0 - opacity * dark)[:, :, None]
    return ImageBuffer(clamp01(img.data * mask))


def xdog_sensitivity(img: ImageBuffer, strength: float) -> ImageBuffer:
    """Darken fine edges: more strength lowers the xDoG threshold (more lines)."""
    s = _check_strength(strength)
    opacity = min(s, 1.0)
    if opacity == 0.0:
        return ImageBuffer(img.data.copy())
    epsilon = _CONTOUR_XDOG["epsilon"] * (1.0 - 0.75 * opacity)
    mask = (1.0 - opacity * _edge_darkness(img, epsilon))[:, :, None]
    return ImageBuffer(clamp01(img.data * mask))


ATTRIBUTE_FILTERS: dict[str, Callable[[ImageBuffer, float], ImageBuffer]] = {
    "blackpoint": blackpoint,
    "colorfulness": colorfulness,
    "depthPower": local_contrast,
    "details": details,
    "xdogSensitivity": xdog_sensitivity,
    "contourWidth": contour_overlay,
}


def validate_attributes(names) -> list[str]:
    unknown = [n for n in names if n not in ATTRIBUTE_FILTERS]
    if unknown:
        raise ImageError(f"unknown attributes {unknown}; known: {list(KNOWN_ATTRIBUTES)}")
    return list(names)


def apply_style(img: ImageBuffer, strengths: Mapping[str, float]) -> ImageBuffer:
    """Apply every named attribute filter in canonical order."""
    validate_attributes(strengths.keys())
    out = img
    for name in KNOWN_ATTRIBUTES:
        if name in strengths:
            out = ATTRIBUTE_FILTERS[name](out, strengths[name])
    return out


# --- Canny edge maps ---------------------------------------------------------

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def _correlate3(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(plane, 1, mode="reflect")
    out = np.zeros_like(plane)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy : dy + plane.shape[0], dx : dx + plane.shape[1]]
    return out


def _nms_direction(angle: float) -> tuple[tuple[int, int], tuple[int, int]]:
    """Neighbor offsets (dy, dx) along the quantized gradient direction.

    The first (leading) neighbor is compared with >=, the second with >, so an
    exact magnitude tie on a symmetric ridge keeps exactly one pixel.
    """
    deg = math.degrees(angle) % 180.0
    if deg < 22.5 or deg >= 157.5:
        return (0, 1), (0, -1)
    if deg < 67.5:
        return (1, -1), (-1, 1)
    if deg < 112.5:
        return (1, 0), (-1, 0)
    return (-1, -1), (1, 1)


def edge_map(img: ImageBuffer, low: float = 0.1, high: float = 0.3) -> ImageBuffer:
    """Binary Canny edges: Gaussian sigma=1, Sobel, non-max suppression, hysteresis.

    Thresholds are relative to the maximum gradient magnitude, 0 <= low < high <= 1.
    """
    if not (0.0 <= low < high <= 1.0):
        raise ImageError(f"require 0 <= low < high <= 1, got low={low} high={high}")
    smoothed = gaussian_blur(img.gray().astype(np.float64), 1.0)
    gx = _correlate3(smoothed, _SOBEL_X)
    gy = _correlate3(smoothed, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    h, w = mag.shape
    # magnitudes at float-cancellation scale are flat regions, not edges
    if mag.max() <= 1e-12:
        return ImageBuffer(np.zeros((h, w, 1)))

    suppressed = np.zeros_like(mag)
    for i in range(h):
        for j in range(w):
            if mag[i, j] == 0.0:
                continue
            (ady, adx), (bdy, bdx) = _nms_direction(math.atan2(gy[i, j], gx[i, j]))
            a = mag[i + ady, j + adx] if 0 <= i + ady < h and 0 <= j + adx < w else 0.0
            b = mag[i + bdy, j + bdx] if 0 <= i + bdy < h and 0 <= j + bdx < w else 0.0
            if mag[i, j] >= a and mag[i, j] > b:
                suppressed[i, j] = mag[i, j]

    high_cut = high * mag.max()
    low_cut = low * mag.max()
    strong = suppressed >= high_cut
    weak = (suppressed >= low_cut) & ~strong

    # Hysteresis: keep weak pixels 8-connected to a strong one.
    keep = strong.copy()
    stack = list(zip(*np.nonzero(strong)))
    while stack:
        i, j = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                y, x = i + dy, j + dx
                if 0 <= y < h and 0 <= x < w and weak[y, x] and not keep[y, x]:
                    keep[y, x] = True
                    stack.append((y, x))
    return ImageBuffer(keep.astype(np.float64)[:, :, None])
