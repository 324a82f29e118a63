"""Stochastic view generation: random resized crops plus horizontal flips.

Interpolation is bilinear with half-pixel centers (source coordinate of
output pixel o is (o + 0.5) * scale - 0.5, clamped), so any two
implementations of this module agree bit-for-bit at test tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_float64

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
MAX_CROP_ATTEMPTS = 10


@dataclass
class AugmentConfig:
    n_views: int = 64
    crop_scale: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    output_size: int = 224

    def __post_init__(self):
        lo, hi = self.crop_scale
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop scale bounds must satisfy 0 < lo <= hi <= 1")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip probability must be in [0, 1]")
        if self.output_size < 1:
            raise ValueError("output size must be positive")


@dataclass
class ViewSet:
    views: np.ndarray          # (N, S, S, 3); view 0 is the resized original
    provenance: str = ""

    def __len__(self) -> int:
        return self.views.shape[0]


def _axis_coords(out_size: int, in_size: int, offset: float = 0.0,
                 span: float | None = None) -> np.ndarray:
    span = in_size if span is None else span
    coords = (np.arange(out_size) + 0.5) * (span / out_size) - 0.5 + offset
    return np.clip(coords, 0.0, in_size - 1.0)


def _gather_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = as_float64(img)
    ys = _axis_coords(out_h, img.shape[0])
    xs = _axis_coords(out_w, img.shape[1])
    return _gather_bilinear(img, ys, xs)


def crop_resize(img: np.ndarray, top: int, left: int, crop_h: int, crop_w: int,
                out_size: int) -> np.ndarray:
    """Resize the (top, left, crop_h, crop_w) window to out_size x out_size."""
    img = as_float64(img)
    ys = _axis_coords(out_size, img.shape[0], offset=float(top), span=float(crop_h))
    xs = _axis_coords(out_size, img.shape[1], offset=float(left), span=float(crop_w))
    return _gather_bilinear(img, ys, xs)


def sample_crop(gen: np.random.Generator, height: int, width: int,
                scale_range: tuple[float, float]) -> tuple[int, int, int, int]:
    """Random crop rectangle: area fraction uniform in scale_range, aspect
    ratio log-uniform in [3/4, 4/3]; falls back to the full frame after
    MAX_CROP_ATTEMPTS rejected rectangles."""
    area = height * width
    for _ in range(MAX_CROP_ATTEMPTS):
        target_area = area * gen.uniform(scale_range[0], scale_range[1])
        log_lo, log_hi = np.log(ASPECT_RANGE[0]), np.log(ASPECT_RANGE[1])
        ratio = np.exp(gen.uniform(log_lo, log_hi))
        crop_w = int(round(np.sqrt(target_area * ratio)))
        crop_h = int(round(np.sqrt(target_area / ratio)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            top = int(gen.integers(0, height - crop_h + 1))
            left = int(gen.integers(0, width - crop_w + 1))
            return top, left, crop_h, crop_w
    return 0, 0, height, width


def generate_views(x: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> ViewSet:
    """View 0 is resize(x); views 1..N-1 are crop+flip draws from rng."""
    x = as_float64(x)
    if x.ndim != 3 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("image must be at least 2x2 with a channel axis")
    gen = rng.generator()
    size = cfg.output_size
    views = np.empty((cfg.n_views, size, size, x.shape[2]))
    views[0] = resize_bilinear(x, size, size)
    for i in range(1, cfg.n_views):
        top, left, crop_h, crop_w = sample_crop(gen, x.shape[0], x.shape[1],
                                                cfg.crop_scale)
        view = crop_resize(x, top, left, crop_h, crop_w, size)
        if gen.uniform() < cfg.flip_prob:
            view = view[:, ::-1, :]
        views[i] = view
    return ViewSet(views=views, provenance=f"seed={rng.seed}/{rng.stream_id}")
