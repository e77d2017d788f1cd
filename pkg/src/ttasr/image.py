"""Pixel containers, resampling, patch sampling and evaluation metrics.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3}
and float samples in [0, 1].  Every public function here returns a new array
and never mutates its input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from scipy.signal import convolve2d

# BT.601 studio-swing luma, inputs and outputs in [0, 1].
LUMA_WEIGHTS = (0.257, 0.504, 0.098)
LUMA_OFFSET = 16.0 / 255.0

# Returned by psnr() for (numerically) identical inputs.
PSNR_INF = math.inf

KEYS_A = -0.5


class ImageError(ValueError):
    """Base class for invalid image arguments."""


class ChannelError(ImageError):
    pass


class DimensionError(ImageError):
    pass


class SizeError(ImageError):
    pass


class ParameterError(ValueError):
    pass


def as_image(data, *, copy: bool = True) -> np.ndarray:
    """Validate ``data`` and return it as an ``(H, W, C)`` float64 array."""
    arr = np.array(data, dtype=np.float64, copy=copy)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ChannelError(f"expected HxWx1 or HxWx3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"empty image of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains non-finite samples")
    return arr


def clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# I/O


def read_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode in ("L", "I", "I;16", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, as a PNG write/read round trip would."""
    return np.round(clamp(img) * 255.0) / 255.0


def write_png(path: str | Path, img: np.ndarray) -> None:
    img = as_image(img, copy=False)
    data = np.round(clamp(img) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(data, mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # no timestamps or text chunks, so identical pixels give identical bytes
    pil.save(path, format="PNG", optimize=False, compress_level=6)


# ---------------------------------------------------------------------------
# Colour and metrics


def to_luminance(img: np.ndarray) -> np.ndarray:
    img = as_image(img, copy=False)
    if img.shape[2] != 3:
        raise ChannelError(f"luminance needs a 3-channel image, got {img.shape[2]}")
    r, g, b = LUMA_WEIGHTS
    y = r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2] + LUMA_OFFSET
    return clamp(y)[:, :, None]


def _metric_plane(img: np.ndarray, use_y: bool) -> np.ndarray:
    if img.shape[2] == 3 and use_y:
        return to_luminance(img)
    return img


def psnr(a: np.ndarray, b: np.ndarray, shave: int = 0, *, use_y: bool = True) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1.

    Three-channel inputs are compared on luminance unless ``use_y`` is False.
    Returns :data:`PSNR_INF` when the mean squared error is below 1e-12.
    """
    a = as_image(a, copy=False)
    b = as_image(b, copy=False)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if shave < 0 or 2 * shave >= min(h, w):
        raise ParameterError(f"shave={shave} invalid for {h}x{w} image")
    a = _metric_plane(a, use_y)
    b = _metric_plane(b, use_y)
    if shave:
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


@lru_cache(maxsize=None)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, *, use_y: bool = True) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, range 1).

    Multi-channel inputs without luminance conversion are averaged per channel.
    """
    a = as_image(a, copy=False)
    b = as_image(b, copy=False)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < 11:
        raise SizeError(f"ssim needs at least 11x11 pixels, got {a.shape[:2]}")
    a = _metric_plane(a, use_y)
    b = _metric_plane(b, use_y)
    win = gaussian_window()
    c1 = 0.01**2
    c2 = 0.03**2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = convolve2d(x, win, mode="valid")
        my = convolve2d(y, win, mode="valid")
        sxx = convolve2d(x * x, win, mode="valid") - mx * mx
        syy = convolve2d(y * y, win, mode="valid") - my * my
        sxy = convolve2d(x * y, win, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Bicubic resampling


def keys_kernel(t: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    tf = t[far]
    out[far] = a * tf**3 - 5 * a * tf**2 + 8 * a * tf - 4 * a
    return out


def _as_scale(scale) -> Fraction:
    try:
        s = Fraction(scale).limit_denominator(10_000)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"invalid scale {scale!r}") from exc
    if s <= 0:
        raise ParameterError(f"scale must be positive, got {scale!r}")
    return s


def output_size(n: int, scale) -> int:
    return int(math.floor(n * float(_as_scale(scale)) + 0.5))


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, scale: Fraction) -> np.ndarray:
    """Dense ``(n_out, n_in)`` matrix applying 1-D Keys resampling.

    Source coordinate of output sample ``i`` is ``(i + 0.5) / scale - 0.5``.
    On minification the kernel is stretched by ``1 / scale``; taps are
    renormalized and out-of-range indices are clamped to the edge.
    """
    scale = _as_scale(scale)
    n_out = output_size(n_in, scale)
    if n_out < 1:
        raise ParameterError(f"scale {scale} maps {n_in} pixels to nothing")
    sf = float(scale)
    stretch = min(sf, 1.0)
    radius = 2.0 / stretch
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) / sf - 0.5
        lo = math.floor(center - radius)
        hi = math.ceil(center + radius)
        taps = np.arange(lo, hi + 1)
        w = keys_kernel((taps - center) * stretch)
        keep = w != 0.0
        taps, w = taps[keep], w[keep]
        w = w / w.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    return mat


def resize_tensor(x: torch.Tensor, scale) -> torch.Tensor:
    """Differentiable bicubic resampling of an ``(N, C, H, W)`` tensor (no clamp)."""
    scale = _as_scale(scale)
    h, w = x.shape[-2:]
    mh = torch.from_numpy(resize_matrix(h, scale)).to(x.dtype)
    mw = torch.from_numpy(resize_matrix(w, scale)).to(x.dtype)
    return mh @ x @ mw.T


def bicubic_resample(img: np.ndarray, scale) -> np.ndarray:
    img = as_image(img, copy=False)
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    y = resize_tensor(x, scale)[0].numpy().transpose(1, 2, 0)
    return clamp(y)


# ---------------------------------------------------------------------------
# Patches


def dihedral(img: np.ndarray, code: int) -> np.ndarray:
    """Apply dihedral element ``code``: optional left-right flip (code >= 4),
    then ``code % 4`` counter-clockwise quarter turns."""
    if not 0 <= code < 8:
        raise ParameterError(f"augment code must be in [0, 8), got {code}")
    out = img[:, ::-1] if code >= 4 else img
    return np.ascontiguousarray(np.rot90(out, code % 4, axes=(0, 1)))


def dihedral_inverse(img: np.ndarray, code: int) -> np.ndarray:
    if not 0 <= code < 8:
        raise ParameterError(f"augment code must be in [0, 8), got {code}")
    out = np.rot90(img, -(code % 4), axes=(0, 1))
    if code >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class Patch:
    image: np.ndarray
    origin_row: int
    origin_col: int
    augment_code: int = 0


def sample_patch(img: np.ndarray, size: int, rng: np.random.Generator, augment: bool = False) -> Patch:
    """Crop a ``size`` x ``size`` patch at a uniformly drawn origin.

    Draw order on ``rng``: row, column, then the augment code when ``augment``.
    """
    h, w = img.shape[:2]
    if size < 1 or size > min(h, w):
        raise SizeError(f"patch size {size} does not fit a {h}x{w} image")
    row = int(rng.integers(0, h - size + 1))
    col = int(rng.integers(0, w - size + 1))
    code = int(rng.integers(0, 8)) if augment else 0
    crop = img[row : row + size, col : col + size]
    return Patch(dihedral(crop, code), row, col, code)
