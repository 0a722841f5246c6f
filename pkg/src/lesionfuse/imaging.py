"""Image I/O, colour constancy, CLAHE, resampling, SR targets and augmentation.

Images are ``float32`` arrays of shape (H, W, 3) with values in [0, 1].
Conversion to and from 8 bits happens only at file boundaries.  All
resampling uses the half-pixel-centre convention
``src = (dst + 0.5) * in / out - 0.5`` with edge clamping.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import ConfigError, FormatError, ShapeError

SR_SUFFIX = ".sr.png"

# BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def _check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an H×W×3 image, got shape {image.shape}")
    return image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


# ----------------------------------------------------------------------------
# I/O


def load_image(path) -> np.ndarray:
    """Read a PNG or PPM (P6) file as an RGB float image."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I", "I;16", "I;16B", "F", "CMYK"):
                raise FormatError(f"{path}: unsupported pixel encoding {im.mode}")
            rgb = im.convert("RGB")
    except FormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return from_uint8(np.asarray(rgb, dtype=np.uint8))


def save_image(image: np.ndarray, path) -> None:
    """Write an image as 8-bit RGB; the format follows the suffix (.png or .ppm)."""
    path = Path(path)
    image = _check_image(np.asarray(image))
    if not path.parent.exists():
        raise FileNotFoundError(f"directory does not exist: {path.parent}")
    suffix = path.suffix.lower()
    if suffix not in (".png", ".ppm"):
        raise FormatError(f"unsupported output format {suffix!r}")
    PILImage.fromarray(to_uint8(image), mode="RGB").save(
        path, format="PNG" if suffix == ".png" else "PPM")


def sr_path_for(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + SR_SUFFIX)


# ----------------------------------------------------------------------------
# colour constancy


def shades_of_gray(image: np.ndarray, p: float = 6.0) -> np.ndarray:
    """Minkowski-norm illuminant estimate and per-channel von Kries correction.

    A channel whose estimate is zero is left unscaled.
    """
    if p < 1:
        raise ConfigError("shades_of_gray needs p >= 1")
    img = _check_image(np.asarray(image, dtype=np.float64))
    flat = img.reshape(-1, 3)
    if math.isinf(p):
        est = flat.max(axis=0)
    else:
        est = np.mean(flat ** p, axis=0) ** (1.0 / p)
    valid = est > 0
    if not valid.any():
        return np.asarray(image, dtype=np.float32).copy()
    target = est[valid].mean()
    gains = np.ones(3)
    gains[valid] = target / est[valid]
    return np.clip(img * gains, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------------
# CLAHE


def rgb_to_luma_chroma(image: np.ndarray):
    img = np.asarray(image, dtype=np.float64)
    y = img @ _LUMA
    return y, img[..., 2] - y, img[..., 0] - y


def luma_chroma_to_rgb(y, cb, cr) -> np.ndarray:
    b = cb + y
    r = cr + y
    g = (y - _LUMA[0] * r - _LUMA[2] * b) / _LUMA[1]
    return np.stack([r, g, b], axis=-1)


def _tile_bounds(extent: int, tiles: int):
    edges = np.linspace(0, extent, tiles + 1).round().astype(int)
    return list(zip(edges[:-1], edges[1:]))


def _tile_lut(levels: np.ndarray, clip_limit: float, bins: int) -> np.ndarray:
    hist = np.bincount(levels.ravel(), minlength=bins).astype(np.float64)
    identity = np.arange(bins) / (bins - 1)
    if np.count_nonzero(hist) <= 1:
        # a single occupied bin maps to itself
        return identity
    total = hist.sum()
    if math.isfinite(clip_limit):
        limit = clip_limit * total / bins
        excess = np.maximum(hist - limit, 0.0).sum()
        hist = np.minimum(hist, limit) + excess / bins
    return np.cumsum(hist) / total


def _equalize_plane(plane: np.ndarray, clip_limit: float, tiles: int, bins: int) -> np.ndarray:
    h, w = plane.shape
    levels = np.clip(np.rint(plane * (bins - 1)), 0, bins - 1).astype(np.int64)
    ty, tx = min(tiles, h), min(tiles, w)
    rows, cols = _tile_bounds(h, ty), _tile_bounds(w, tx)
    luts = np.empty((ty, tx, bins))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            luts[i, j] = _tile_lut(levels[r0:r1, c0:c1], clip_limit, bins)

    # bilinear blend of the four nearest tile mappings, clamped at the borders
    cy = np.array([(a + b) / 2.0 - 0.5 for a, b in rows])
    cx = np.array([(a + b) / 2.0 - 0.5 for a, b in cols])
    y0, wy = _blend_coords(np.arange(h), cy)
    x0, wx = _blend_coords(np.arange(w), cx)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    yy0, xx0 = y0[:, None], x0[None, :]
    yy1, xx1 = y1[:, None], x1[None, :]
    wyy, wxx = wy[:, None], wx[None, :]
    top = (1 - wxx) * luts[yy0, xx0, levels] + wxx * luts[yy0, xx1, levels]
    bottom = (1 - wxx) * luts[yy1, xx0, levels] + wxx * luts[yy1, xx1, levels]
    return (1 - wyy) * top + wyy * bottom


def _blend_coords(pos: np.ndarray, centers: np.ndarray):
    if len(centers) == 1:
        return np.zeros(len(pos), dtype=int), np.zeros(len(pos))
    idx = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, len(centers) - 2)
    t = (pos - centers[idx]) / (centers[idx + 1] - centers[idx])
    return idx, np.clip(t, 0.0, 1.0)


def clahe(image: np.ndarray, clip_limit: float = 2.0, tiles: int = 8, bins: int = 256,
          per_channel: bool = False) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    ``clip_limit`` is a multiple of the mean bin count; ``math.inf`` disables
    clipping.  By default only the BT.601 luma is equalised and chroma
    differences are carried over.  ``per_channel=True`` equalises R, G and B
    independently instead.
    """
    if clip_limit < 1:
        raise ConfigError("clip_limit must be >= 1")
    if tiles < 1:
        raise ConfigError("tiles must be >= 1")
    img = _check_image(np.asarray(image, dtype=np.float64))
    if per_channel:
        out = np.stack([_equalize_plane(img[..., c], clip_limit, tiles, bins)
                        for c in range(3)], axis=-1)
    else:
        y, cb, cr = rgb_to_luma_chroma(img)
        out = luma_chroma_to_rgb(_equalize_plane(y, clip_limit, tiles, bins), cb, cr)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------------
# resampling


def _source_coords(out_n: int, in_n: int) -> np.ndarray:
    src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
    return np.clip(src, 0.0, in_n - 1)


def _linear_weights(out_n: int, in_n: int):
    src = _source_coords(out_n, in_n)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, in_n - 1)
    t = src - i0
    return i0, i1, t


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling; works on (H, W) or (H, W, C) arrays."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("output extents must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.asarray(image, dtype=np.float32).copy()
    y0, y1, ty = _linear_weights(out_h, h)
    x0, x1, tx = _linear_weights(out_w, w)
    extra = (None,) * (img.ndim - 2)
    ty = ty[(slice(None), None) + extra]
    tx = tx[(None, slice(None)) + extra]
    rows0, rows1 = img[y0], img[y1]
    top = rows0[:, x0] * (1 - tx) + rows0[:, x1] * tx
    bottom = rows1[:, x0] * (1 - tx) + rows1[:, x1] * tx
    return np.clip(top * (1 - ty) + bottom * ty, 0.0, 1.0).astype(np.float32) \
        if img.ndim == 3 else (top * (1 - ty) + bottom * ty).astype(np.float32)


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))


def _cubic_matrix(out_n: int, in_n: int) -> np.ndarray:
    src = np.clip((np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5, 0.0, in_n - 1)
    base = np.floor(src).astype(int)
    m = np.zeros((out_n, in_n))
    for k in range(-1, 3):
        idx = base + k
        wts = _cubic_kernel(src - idx)
        np.add.at(m, (np.arange(out_n), np.clip(idx, 0, in_n - 1)), wts)
    return m


def resize_bicubic(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) resampling with clamped borders."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("output extents must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    mh, mw = _cubic_matrix(out_h, h), _cubic_matrix(out_w, w)
    out = np.einsum("oh,hwc->owc", mh, img) if img.ndim == 3 else mh @ img
    out = np.einsum("pw,owc->opc", mw, out) if img.ndim == 3 else out @ mw.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sr_target(image: np.ndarray, method: str = "bilinear", factor: int = 2,
              source_path=None) -> np.ndarray:
    """The super-resolution target the decoder learns to predict.

    ``method="file"`` reads ``<stem>.sr.png`` next to ``source_path`` (for
    externally generated targets) and checks its size.
    """
    if factor < 1 or factor & (factor - 1):
        raise ConfigError("SR factor must be a power of two")
    img = _check_image(np.asarray(image))
    h, w = img.shape[:2]
    if method == "bilinear":
        return resize_bilinear(img, factor * h, factor * w)
    if method == "bicubic":
        return resize_bicubic(img, factor * h, factor * w)
    if method == "file":
        if source_path is None:
            raise ConfigError("file SR targets need the source image path")
        path = sr_path_for(source_path)
        if not path.exists():
            raise FileNotFoundError(f"missing SR target file {path}")
        target = load_image(path)
        if target.shape[:2] != (factor * h, factor * w):
            raise ShapeError(f"{path}: SR target is {target.shape[:2]}, expected "
                             f"{(factor * h, factor * w)}")
        return target
    raise ConfigError(f"unknown SR method {method!r}")


# ----------------------------------------------------------------------------
# preprocessing chain


@dataclass
class PreprocessConfig:
    size: int = 64
    sog_p: float = 6.0
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    clahe_per_channel: bool = False
    skip_color: bool = False
    skip_clahe: bool = False


def preprocess(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Colour constancy, then CLAHE, then resize to ``cfg.size`` squared."""
    out = np.asarray(image, dtype=np.float32)
    if not cfg.skip_color:
        out = shades_of_gray(out, cfg.sog_p)
    if not cfg.skip_clahe:
        out = clahe(out, cfg.clahe_clip, cfg.clahe_tiles, per_channel=cfg.clahe_per_channel)
    return resize_bilinear(out, cfg.size, cfg.size)


# ----------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    scale_range: Tuple[float, float] = (0.9, 1.1)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        lo, hi = self.scale_range
        if not (0 < lo <= 1 <= hi):
            raise ConfigError("scale_range must satisfy 0 < lo <= 1 <= hi")
        for name in ("hflip_prob", "vflip_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0, 0.0, seed)


@dataclass
class AugmentParams:
    """One concrete draw of augmentation parameters."""
    hflip: bool = False
    vflip: bool = False
    scale: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    noise_seed: Optional[int] = None
    noise_sigma: float = 0.0


def draw_augment(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    # draw every variate unconditionally so the stream layout never depends on cfg
    u = rng.random(6)
    lo, hi = cfg.scale_range
    return AugmentParams(
        hflip=bool(u[0] < cfg.hflip_prob),
        vflip=bool(u[1] < cfg.vflip_prob),
        scale=float(lo + (hi - lo) * u[2]),
        brightness=float(cfg.brightness * (2 * u[3] - 1)),
        contrast=float(1 + cfg.contrast * (2 * u[4] - 1)),
        saturation=float(1 + cfg.saturation * (2 * u[5] - 1)),
        noise_seed=int(rng.integers(0, 2 ** 63 - 1)),
        noise_sigma=cfg.noise_sigma,
    )


def zoom_center(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the image centre, keeping the extent (crop or edge-extend)."""
    if factor == 1.0:
        return np.asarray(image, dtype=np.float32).copy()
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    def axis(n):
        src = np.clip((np.arange(n) + 0.5 - n / 2.0) / factor + n / 2.0 - 0.5, 0.0, n - 1)
        i0 = np.floor(src).astype(int)
        return i0, np.minimum(i0 + 1, n - 1), src - i0

    y0, y1, ty = axis(h)
    x0, x1, tx = axis(w)
    ty, tx = ty[:, None, None], tx[None, :, None]
    top = img[y0][:, x0] * (1 - tx) + img[y0][:, x1] * tx
    bottom = img[y1][:, x0] * (1 - tx) + img[y1][:, x1] * tx
    return np.clip(top * (1 - ty) + bottom * ty, 0.0, 1.0).astype(np.float32)


def apply_geometry(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = np.asarray(image, dtype=np.float32)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    out = zoom_center(out, params.scale)
    return np.ascontiguousarray(out)


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = apply_geometry(_check_image(np.asarray(image)), params).astype(np.float64)
    if params.brightness != 0.0:
        out = np.clip(out + params.brightness, 0.0, 1.0)
    if params.contrast != 1.0:
        m = float((out @ _LUMA).mean())
        out = np.clip(m + params.contrast * (out - m), 0.0, 1.0)
    if params.saturation != 1.0:
        luma = (out @ _LUMA)[..., None]
        out = np.clip(luma + params.saturation * (out - luma), 0.0, 1.0)
    if params.noise_sigma > 0:
        noise = np.random.default_rng(params.noise_seed).normal(0.0, params.noise_sigma, out.shape)
        out = out + noise
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flips, scale, photometric jitter and Gaussian noise, in that order."""
    return apply_augment(image, draw_augment(cfg, rng))
