"""Raster helpers: blackening, bilinear crop+rescale, synthetic scenes, file I/O.

Images are numpy arrays of shape ``(height, width, channels)`` with
intensities in ``[0, 1]``; ``channels`` is 1 or 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .geometry import Region, clamp

DTYPE = np.float32


class EmptyCrop(ValueError):
    pass


class InfeasibleSpec(ValueError):
    pass


def as_image(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    return arr


def image_dims(img: np.ndarray) -> Tuple[int, int]:
    """(width, height) of an image array."""
    return img.shape[1], img.shape[0]


def blacken(img: np.ndarray, region: Region) -> np.ndarray:
    out = img.copy()
    r = clamp(region, img.shape[1], img.shape[0])
    if r is not None:
        out[r.y : r.y2, r.x : r.x2, :] = 0
    return out


def blacken_batch(img: np.ndarray, regions: Sequence[Region]) -> np.ndarray:
    out = np.repeat(img[None], len(regions), axis=0)
    h, w = img.shape[:2]
    for i, region in enumerate(regions):
        r = clamp(region, w, h)
        if r is not None:
            out[i, r.y : r.y2, r.x : r.x2, :] = 0
    return out


def _sample_axis(start: np.ndarray, length: np.ndarray, n_out: int):
    """Corner-aligned source coordinates for each output index.

    ``start``/``length`` are per-region arrays; returns (lo, hi, frac) of
    shape (regions, n_out).
    """
    if n_out == 1:
        pos = (length - 1)[:, None] / 2.0
    else:
        step = (length - 1)[:, None] / (n_out - 1)
        pos = np.arange(n_out)[None, :] * step
    lo = np.floor(pos).astype(np.int64)
    frac = (pos - lo).astype(DTYPE)
    hi = np.minimum(lo + 1, (length - 1)[:, None])
    return lo + start[:, None], hi + start[:, None], frac


def crop_rescale_batch(
    img: np.ndarray, regions: Sequence[Region], target: Tuple[int, int]
) -> np.ndarray:
    """Crop every region out of ``img`` and resample each to ``target`` = (w, h).

    Bilinear, corner-aligned: output pixel ``i`` samples source position
    ``i * (n_in - 1) / (n_out - 1)`` inside the crop.
    """
    tw, th = target
    if tw < 1 or th < 1:
        raise ValueError("target dims must be >= 1")
    h, w = img.shape[:2]
    clamped = []
    for region in regions:
        r = clamp(region, w, h)
        if r is None:
            raise EmptyCrop("empty crop")
        clamped.append(r)
    xs = np.array([r.x for r in clamped])
    ys = np.array([r.y for r in clamped])
    ws = np.array([r.w for r in clamped])
    hs = np.array([r.h for r in clamped])
    x0, x1, fx = _sample_axis(xs, ws, tw)
    y0, y1, fy = _sample_axis(ys, hs, th)

    flat = img.reshape(h * w, img.shape[2])
    r0, r1 = (y0 * w)[:, :, None], (y1 * w)[:, :, None]
    c0, c1 = x0[:, None, :], x1[:, None, :]
    fx = fx[:, None, :, None]
    fy = fy[:, :, None, None]
    # a + (b - a) * t keeps constant neighbourhoods exactly constant
    top = np.take(flat, r0 + c0, axis=0)
    top += (np.take(flat, r0 + c1, axis=0) - top) * fx
    bottom = np.take(flat, r1 + c0, axis=0)
    bottom += (np.take(flat, r1 + c1, axis=0) - bottom) * fx
    top += (bottom - top) * fy
    return np.clip(top, 0.0, 1.0, out=top)


def crop_rescale(img: np.ndarray, region: Region, target: Tuple[int, int]) -> np.ndarray:
    return crop_rescale_batch(img, [region], target)[0]


def resize(img: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Whole-image bilinear resample; returns ``img`` itself when sizes match."""
    w, h = image_dims(img)
    if (w, h) == tuple(target):
        return img
    return crop_rescale(img, Region.frame(w, h), target)


@dataclass(frozen=True)
class SyntheticSpec:
    frame: Tuple[int, int] = (128, 128)
    class_count: int = 2
    palette: Tuple[Tuple[float, ...], ...] = ((0.9, 0.2, 0.2), (0.2, 0.4, 0.9))
    object_area_fraction_range: Tuple[float, float] = (0.15, 0.35)
    background_color: Tuple[float, ...] = (0.5, 0.5, 0.5)
    aspect_range: Tuple[float, float] = (0.75, 1.333)
    margin: int = 2

    def __post_init__(self):
        lo, hi = self.object_area_fraction_range
        if not 0 < lo < hi < 1:
            raise InfeasibleSpec("object_area_fraction_range must satisfy 0 < lo < hi < 1")
        if self.class_count < 1 or len(self.palette) < self.class_count:
            raise InfeasibleSpec("palette needs one color per class")
        for i, c in enumerate(self.palette[: self.class_count]):
            if len(c) != len(self.background_color):
                raise InfeasibleSpec("palette and background must have equal channels")
            if _chebyshev(c, self.background_color) < 0.2:
                raise InfeasibleSpec(f"palette color {i} too close to background")
            for j in range(i):
                if _chebyshev(c, self.palette[j]) < 0.2:
                    raise InfeasibleSpec(f"palette colors {j} and {i} too close")

    @property
    def channels(self) -> int:
        return len(self.background_color)


def _chebyshev(a, b) -> float:
    return max(abs(x - y) for x, y in zip(a, b))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Tuple[np.ndarray, Region, int]:
    """One solid palette-colored rectangle on a flat background.

    Returns ``(image, ground_truth, class_id)``; deterministic in ``(spec, seed)``.
    """
    rng = np.random.default_rng(seed)
    fw, fh = spec.frame
    lo, hi = spec.object_area_fraction_range
    total = fw * fh
    avail_w, avail_h = fw - 2 * spec.margin, fh - 2 * spec.margin
    if avail_w < 1 or avail_h < 1:
        raise InfeasibleSpec("infeasible spec")

    # every integer (w, h) that fits the margins and hits the area band
    ws = np.arange(1, avail_w + 1)[:, None]
    hs = np.arange(1, avail_h + 1)[None, :]
    area = ws * hs
    ok = (area >= lo * total) & (area <= hi * total)
    if not ok.any():
        raise InfeasibleSpec("infeasible spec")
    a_lo, a_hi = spec.aspect_range
    shaped = ok & (ws / hs >= a_lo) & (ws / hs <= a_hi)
    if shaped.any():
        ok = shaped

    target = rng.uniform(lo, hi) * total
    aspect = np.exp(rng.uniform(np.log(a_lo), np.log(a_hi)))
    cand_w, cand_h = np.nonzero(ok)
    cand_w, cand_h = cand_w + 1, cand_h + 1
    cost = np.abs(np.log(cand_w * cand_h / target)) + np.abs(np.log(cand_w / cand_h / aspect))
    best = int(np.argmin(cost))
    w, h = int(cand_w[best]), int(cand_h[best])

    x = int(rng.integers(spec.margin, fw - spec.margin - w + 1))
    y = int(rng.integers(spec.margin, fh - spec.margin - h + 1))
    cls = int(rng.integers(spec.class_count))

    img = np.empty((fh, fw, spec.channels), dtype=DTYPE)
    img[:] = np.asarray(spec.background_color, dtype=DTYPE)
    img[y : y + h, x : x + w] = np.asarray(spec.palette[cls], dtype=DTYPE)
    return img, Region(x, y, w, h), cls


def read_image(path) -> np.ndarray:
    """Load an 8-bit PNG (or any Pillow-readable raster) into [0, 1] floats."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        im.load()
        mode = "L" if im.mode in ("1", "L", "I;16", "I", "F") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.uint8)
    return as_image(arr.astype(DTYPE) / 255.0)


def write_image(path, img: np.ndarray) -> None:
    from PIL import Image as PILImage

    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(Path(path), format="PNG")
