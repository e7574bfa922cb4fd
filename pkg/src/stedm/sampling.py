"""Style-query sampling strategies and tissue detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import DataError, ParameterError, SamplingError
from .style import StyleQuerySet
from .synth import ImagePool, PatchRef, SlideImage, SlidePool

log = logging.getLogger(__name__)

STRATEGIES = ("augmented", "nearby", "multipatch")
FIXED_THRESHOLD = 0.85


# --------------------------------------------------------------------------
# affine augmentation

@dataclass(frozen=True)
class AffineParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)  # fraction of the side, (dy, dx)
    flip: bool = False


def random_affine(rng: np.random.Generator) -> AffineParams:
    """Rotation within +-180 deg, scale 0.8-1.2, shift up to 10%, coin-flip mirror."""
    return AffineParams(angle_deg=float(rng.uniform(-180, 180)), scale=float(rng.uniform(0.8, 1.2)),
                        shift=tuple(float(s) for s in rng.uniform(-0.1, 0.1, 2)),
                        flip=bool(rng.random() < 0.5))


def apply_affine(arr: np.ndarray, p: AffineParams) -> np.ndarray:
    """Nearest-neighbour warp about the centre with mirror padding.

    Nearest sampling keeps the pixel palette (and mask labels) intact.
    Works on ``(H, W)`` and ``(H, W, C)`` arrays.
    """
    h, w = arr.shape[:2]
    a = np.deg2rad(p.angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) / p.scale
    if p.flip:
        rot = rot @ np.array([[1.0, 0.0], [0.0, -1.0]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - rot @ (center + np.array(p.shift) * np.array([h, w]))
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, rot, offset=offset, order=0, mode="mirror")
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[..., c] = ndimage.affine_transform(arr[..., c], rot, offset=offset, order=0, mode="mirror")
    return out


def sample_augmented(x: np.ndarray, seed, params: Optional[AffineParams] = None) -> StyleQuerySet:
    rng = np.random.default_rng(seed)
    p = params if params is not None else random_affine(rng)
    return StyleQuerySet(apply_affine(np.asarray(x, np.float32), p)[None])


# --------------------------------------------------------------------------
# tissue detection

@dataclass
class TissueMask:
    mask: np.ndarray  # bool, downsampled grid
    level: int

    def full(self, shape) -> np.ndarray:
        """Nearest upsampling back to slide resolution (edge-padded if needed)."""
        up = np.repeat(np.repeat(self.mask, self.level, 0), self.level, 1)
        h, w = shape
        out = np.pad(up, ((0, max(0, h - up.shape[0])), (0, max(0, w - up.shape[1]))), mode="edge")
        return out[:h, :w]


def compute_tissue_mask(slide, method: str = "otsu", level: int = 4) -> TissueMask:
    """Grayscale threshold on a block-averaged slide; tissue is darker."""
    pixels = slide.pixels if hasattr(slide, "pixels") else np.asarray(slide)
    gray = (np.asarray(pixels, np.float64).mean(axis=-1) + 1.0) / 2.0
    level = max(1, int(level))
    h, w = gray.shape
    hh, ww = max(1, h // level), max(1, w // level)
    if h >= level and w >= level:
        small = gray[:hh * level, :ww * level].reshape(hh, level, ww, level).mean(axis=(1, 3))
    else:
        small, level = gray, 1
    if method == "fixed" or np.ptp(small) < 1e-3:
        thr = FIXED_THRESHOLD
    elif method == "otsu":
        thr = threshold_otsu(small)
    else:
        raise ParameterError(f"unknown tissue threshold method {method!r}")
    return TissueMask(small < thr, level)


# --------------------------------------------------------------------------
# slide sampling

def _valid(slide: SlideImage, size: int, threshold: float) -> np.ndarray:
    if size > min(slide.pixels.shape[:2]):
        raise SamplingError("patch larger than slide")
    return slide.valid_positions(size, threshold)


def random_tissue_patch(slide: SlideImage, size: int, rng, threshold: float = 0.5) -> PatchRef:
    valid = _valid(slide, size, threshold)
    flat = np.flatnonzero(valid)
    if flat.size == 0:
        raise SamplingError(f"slide {slide.slide_id} has no tissue patch of size {size}")
    y, x = np.unravel_index(flat[rng.integers(flat.size)], valid.shape)
    return PatchRef(slide.slide_id, int(x), int(y), size)


def sample_nearby(slide: SlideImage, anchor: PatchRef, radius: int, seed,
                  threshold: float = 0.5) -> StyleQuerySet:
    """One tissue patch whose top-left lies within Chebyshev ``radius`` of the anchor.

    The anchor position is excluded while alternatives exist; otherwise the
    anchor itself comes back with ``flagged=True``.
    """
    if radius < 0:
        raise ParameterError("radius must be >= 0")
    rng = np.random.default_rng(seed)
    valid = _valid(slide, anchor.size, threshold)
    y0, y1 = max(0, anchor.y - radius), min(valid.shape[0], anchor.y + radius + 1)
    x0, x1 = max(0, anchor.x - radius), min(valid.shape[1], anchor.x + radius + 1)
    window = valid[y0:y1, x0:x1].copy()
    ay, ax = anchor.y - y0, anchor.x - x0
    anchor_ok = 0 <= ay < window.shape[0] and 0 <= ax < window.shape[1] and window[ay, ax]
    if anchor_ok:
        window[ay, ax] = False
    cand = np.flatnonzero(window)
    if cand.size:
        wy, wx = np.unravel_index(cand[rng.integers(cand.size)], window.shape)
        ref = PatchRef(anchor.slide_id, int(x0 + wx), int(y0 + wy), anchor.size)
        return StyleQuerySet(slide.patch(ref)[None], refs=[ref])
    if anchor_ok:
        return StyleQuerySet(slide.patch(anchor)[None], refs=[anchor], flagged=True)
    raise SamplingError(f"no tissue patch within {radius} px of {anchor}")


def sample_multipatch(slide: SlideImage, n: int, seed, size: int,
                      threshold: float = 0.5) -> StyleQuerySet:
    """``n`` tissue patches drawn uniformly, with replacement."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = np.random.default_rng(seed)
    valid = _valid(slide, size, threshold)
    flat = np.flatnonzero(valid)
    if flat.size == 0:
        raise SamplingError(f"slide {slide.slide_id} has no tissue patch of size {size}")
    picks = flat[rng.integers(flat.size, size=n)]
    ys, xs = np.unravel_index(picks, valid.shape)
    refs = [PatchRef(slide.slide_id, int(x), int(y), size) for y, x in zip(ys, xs)]
    return StyleQuerySet(np.stack([slide.patch(r) for r in refs]), refs=refs)


def sample_inference_styles(pool, strategy: str, n: int, seed, size: Optional[int] = None,
                            threshold: float = 0.5) -> StyleQuerySet:
    """Style queries from an unseen pool.

    Slide pools: nearby/augmented take one random tissue patch of a random
    slide; multipatch takes ``n`` patches of one random slide. Image pools
    return one random image (``n`` for multipatch).
    """
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}")
    if pool is None or len(pool) == 0:
        raise DataError("style pool is empty")
    rng = np.random.default_rng(seed)
    if isinstance(pool, ImagePool):
        k = n if strategy == "multipatch" else 1
        idx = rng.integers(len(pool), size=k)
        return StyleQuerySet(pool.images[idx], refs=[pool.ids[i] for i in idx])
    if not isinstance(pool, SlidePool):
        raise DataError(f"unsupported pool type {type(pool).__name__}")
    slide = pool.slides[rng.integers(len(pool))]
    size = size or 16
    if strategy == "multipatch":
        return sample_multipatch(slide, n, rng, size, threshold)
    ref = random_tissue_patch(slide, size, rng, threshold)
    return StyleQuerySet(slide.patch(ref)[None], refs=[ref])
