"""Synthetic datasets with ground-truth style, plus folder ingestion.

Two generators:

* shapes: a saturated single-hue foreground shape (circle, cross, star or
  blob) on a neutral textured background. Hue is the style; the shape is
  the layout. A hue interval can be held out of the training split.
* slide cohorts: one tiled raster per patient with a tissue region, tumour
  blobs and patient-constant style (tumour hue, tissue hue, saturation,
  texture scale). Annotated patients expose their layout; the rest form the
  unannotated style source, whose hues are shifted by a configured offset.

Pixels are quantised to 8-bit levels at generation time so a PNG round trip
is lossless.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

from .errors import DataError, ParameterError

MANIFEST_SCHEMA_VERSION = 1
SHAPE_CLASSES = ("circle", "cross", "star", "blob")
SPLITS = ("annotated_train", "annotated_val", "style_source", "test")


# --------------------------------------------------------------------------
# pixel helpers

def quantize(rgb01: np.ndarray) -> np.ndarray:
    """[0, 1] RGB -> 8-bit levels -> float32 in [-1, 1]."""
    u8 = np.clip(np.rint(rgb01 * 255.0), 0, 255).astype(np.uint8)
    return from_uint8(u8)


def from_uint8(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_hsv(img: np.ndarray) -> np.ndarray:
    """HSV of an image in [-1, 1]; hue returned in degrees."""
    hsv = rgb_to_hsv(np.clip((np.asarray(img, np.float64) + 1.0) / 2.0, 0, 1))
    hsv[..., 0] *= 360.0
    return hsv


def circular_mean_deg(hues: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    rad = np.deg2rad(np.asarray(hues, np.float64))
    w = np.ones_like(rad) if weights is None else np.asarray(weights, np.float64)
    ang = np.arctan2((w * np.sin(rad)).sum(), (w * np.cos(rad)).sum())
    return float(np.rad2deg(ang) % 360.0)


def hue_distance(a, b):
    d = np.abs((np.asarray(a, np.float64) - np.asarray(b, np.float64)) % 360.0)
    return np.minimum(d, 360.0 - d)


def in_interval(hue, interval) -> np.ndarray:
    lo, hi = interval
    return (np.asarray(hue) - lo) % 360.0 < (hi - lo) % 360.0 if hi != lo else np.zeros_like(hue, bool)


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-8)


# --------------------------------------------------------------------------
# manifests

@dataclass
class SplitManifest:
    """Split membership plus per-item metadata. JSON round-trippable.

    ``items`` maps item id to its metadata (style params, shape class,
    file names). Style-source masks, when they exist, stay in the corpus
    arrays for the evaluation oracles; no training API hands them out.
    """

    kind: str
    seed: Optional[int]
    params: dict
    annotated_train: list
    annotated_val: list
    style_source: list
    test: list
    items: dict = field(default_factory=dict)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ParameterError(f"unknown split {name!r}")
        return getattr(self, name)

    def check_disjoint(self):
        seen = set()
        for name in SPLITS:
            ids = set(self.split(name))
            if seen & ids:
                raise DataError(f"split {name} overlaps an earlier split")
            seen |= ids

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        data = json.loads(text)
        if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise DataError(f"unsupported manifest schema {data.get('schema_version')}")
        return cls(**data)


# --------------------------------------------------------------------------
# shapes

@dataclass
class ShapesExample:
    image: np.ndarray
    mask: np.ndarray
    shape_class: str
    hue_deg: float


def _shape_mask(kind: str, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.4, 0.6, 2) * size
    r = rng.uniform(0.28, 0.42) * size
    theta = rng.uniform(0, 2 * np.pi)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    rho, phi = np.hypot(u, v), np.arctan2(v, u)
    if kind == "circle":
        m = rho <= r
    elif kind == "cross":
        arm = r * 0.38
        m = ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    elif kind == "star":
        m = rho <= r * (0.6 + 0.4 * np.cos(5 * phi))
    elif kind == "blob":
        k = rng.uniform(-0.18, 0.18, 3)
        edge = 1 + k[0] * np.cos(2 * phi + rng.uniform(0, 6)) + k[1] * np.cos(3 * phi) + k[2] * np.sin(phi)
        m = rho <= r * edge
    else:
        raise ParameterError(f"unknown shape {kind!r}")
    if not m.any():
        m[int(cy), int(cx)] = True
    return m


def render_shape(mask: np.ndarray, hue_deg: float, rng, saturation: Optional[float] = None,
                 value: Optional[float] = None) -> np.ndarray:
    """Foreground of one hue on a neutral grey textured background."""
    size = mask.shape[0]
    sat = rng.uniform(0.7, 1.0) if saturation is None else saturation
    val = rng.uniform(0.8, 1.0) if value is None else value
    bg_v = 0.35 + 0.06 * _smooth_noise(rng, (size, size), 1.5)
    fg_v = val + 0.04 * rng.standard_normal((size, size))
    hsv = np.zeros((size, size, 3))
    hsv[..., 0] = (hue_deg % 360.0) / 360.0
    hsv[..., 1] = np.where(mask, sat, 0.04)
    hsv[..., 2] = np.clip(np.where(mask, fg_v, bg_v), 0, 1)
    return quantize(hsv_to_rgb(hsv))


@dataclass
class ShapesCorpus:
    manifest: SplitManifest
    images: np.ndarray        # (N, S, S, 3) float32 in [-1, 1]
    masks: np.ndarray         # (N, S, S) uint8 in {0, 1}
    hues: np.ndarray          # (N,)
    shape_classes: np.ndarray  # (N,) int index into SHAPE_CLASSES

    kind = "shapes"

    def index(self, split: str) -> np.ndarray:
        return np.array([int(i.split("-")[1]) for i in self.manifest.split(split)], dtype=np.int64)

    def example(self, i: int) -> ShapesExample:
        return ShapesExample(self.images[i], self.masks[i], SHAPE_CLASSES[self.shape_classes[i]],
                             float(self.hues[i]))

    def annotated(self, split: str = "annotated_train") -> tuple[np.ndarray, np.ndarray]:
        if split == "style_source":
            raise DataError("style-source items carry no annotations")
        idx = self.index(split)
        return self.images[idx], self.masks[idx]

    def style_pool(self, hue_interval=None) -> "ImagePool":
        idx = self.index("style_source")
        if hue_interval is not None:
            idx = idx[in_interval(self.hues[idx], hue_interval)]
        return ImagePool([f"shape-{i:05d}" for i in idx], self.images[idx])


def gen_shapes_dataset(count: int = 4000, hue_holdout=(200.0, 300.0), seed: int = 0,
                       size: int = 16, fractions=(0.6, 0.1, 0.2, 0.1)) -> ShapesCorpus:
    """Shapes corpus whose training splits avoid the held-out hue interval.

    ``fractions`` gives the share of (annotated_train, annotated_val,
    style_source, test). Only the two annotated splits avoid the holdout.
    """
    lo, hi = float(hue_holdout[0]), float(hue_holdout[1])
    if not (0 <= lo < 360 and 0 < hi <= 360):
        raise ParameterError("holdout bounds must lie in [0, 360)")
    width = (hi - lo) % 360.0
    if width == 0:
        raise ParameterError("holdout interval must be non-empty and not the full circle")
    if count < 4:
        raise ParameterError("need at least 4 examples")
    rng = np.random.default_rng(seed)
    counts = np.floor(np.asarray(fractions) / np.sum(fractions) * count).astype(int)
    counts[0] += count - counts.sum()

    images = np.zeros((count, size, size, 3), np.float32)
    masks = np.zeros((count, size, size), np.uint8)
    hues = np.zeros(count)
    classes = np.zeros(count, np.int64)
    split_ids = {s: [] for s in SPLITS}
    items = {}
    i = 0
    for split, n in zip(SPLITS, counts):
        for _ in range(n):
            k = int(rng.integers(len(SHAPE_CLASSES)))
            if split.startswith("annotated"):
                h = (hi + rng.uniform(0, 360.0 - width)) % 360.0
            else:
                h = rng.uniform(0, 360.0)
            m = _shape_mask(SHAPE_CLASSES[k], size, rng)
            images[i] = render_shape(m, h, rng)
            masks[i], hues[i], classes[i] = m, h, k
            item_id = f"shape-{i:05d}"
            split_ids[split].append(item_id)
            items[item_id] = {"hue_deg": float(h), "shape_class": SHAPE_CLASSES[k]}
            i += 1
    manifest = SplitManifest(
        kind="shapes", seed=seed,
        params={"count": count, "hue_holdout": [lo, hi], "size": size,
                "fractions": list(map(float, fractions))},
        items=items, **split_ids)
    manifest.check_disjoint()
    return ShapesCorpus(manifest, images, masks, hues, classes)


# --------------------------------------------------------------------------
# slides

@dataclass
class PatchRef:
    slide_id: str
    x: int
    y: int
    size: int


class SlideImage:
    """Pixels of one slide. Tissue detection and valid patch positions are
    derived from pixels only and cached per patch size."""

    def __init__(self, slide_id: str, pixels: np.ndarray):
        self.slide_id = slide_id
        self.pixels = pixels
        self._valid: dict = {}

    @cached_property
    def tissue(self):
        from .sampling import compute_tissue_mask
        return compute_tissue_mask(self.pixels).full(self.pixels.shape[:2])

    def valid_positions(self, size: int, threshold: float = 0.5) -> np.ndarray:
        """Bool grid over top-left corners: patch tissue fraction >= threshold."""
        key = (size, threshold)
        if key not in self._valid:
            t = self.tissue.astype(np.int64)
            ii = np.pad(t.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
            sums = ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]
            self._valid[key] = sums >= threshold * size * size
        return self._valid[key]

    def patch(self, ref: PatchRef) -> np.ndarray:
        return self.pixels[ref.y:ref.y + ref.size, ref.x:ref.x + ref.size]


class SyntheticSlide(SlideImage):
    def __init__(self, slide_id: str, pixels: np.ndarray, layout_field: np.ndarray,
                 tissue_field: np.ndarray, patient_id: str, style_params: dict):
        super().__init__(slide_id, pixels)
        if layout_field.shape != pixels.shape[:2]:
            raise DataError("layout field must match pixel dimensions")
        self.layout_field = layout_field
        self.tissue_field = tissue_field
        self.patient_id = patient_id
        self.style_params = style_params

    def layout_patch(self, ref: PatchRef) -> np.ndarray:
        return self.layout_field[ref.y:ref.y + ref.size, ref.x:ref.x + ref.size]

    def pixels_only(self) -> SlideImage:
        return SlideImage(self.slide_id, self.pixels)


def _wobbly_disc(yy, xx, cy, cx, r, rng, amp=0.15):
    phi = np.arctan2(yy - cy, xx - cx)
    edge = np.ones_like(phi)
    for k in (2, 3, 5):
        edge += amp / k * rng.uniform(-1, 1) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
    return np.hypot(yy - cy, xx - cx) <= r * edge


def render_slide(size: int, style: dict, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (pixels, layout_field, tissue_field) for one patient."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tissue = _wobbly_disc(yy, xx, size * rng.uniform(0.45, 0.55), size * rng.uniform(0.45, 0.55),
                          size * rng.uniform(0.34, 0.42), rng, amp=0.35)
    tumor = np.zeros_like(tissue)
    n_blobs = int(rng.integers(3, 7))
    ys, xs = np.nonzero(tissue)
    for _ in range(n_blobs):
        j = rng.integers(len(ys))
        tumor |= _wobbly_disc(yy, xx, ys[j], xs[j], size * rng.uniform(0.04, 0.09), rng, amp=0.4)
    tumor &= tissue

    ts = float(style["texture_scale"])
    coarse = _smooth_noise(rng, (size, size), 3.0)
    fine = _smooth_noise(rng, (size, size), ts / 2.0)
    hsv = np.zeros((size, size, 3))
    hsv[..., 0] = np.where(tumor, style["hue_deg"], style["background_hue"]) / 360.0
    sat = float(style["saturation"])
    hsv[..., 1] = np.where(tissue, np.where(tumor, min(sat + 0.15, 1.0), sat), 0.03)
    val = np.where(tumor, 0.62 + 0.07 * fine, 0.80 + 0.05 * coarse)
    hsv[..., 2] = np.clip(np.where(tissue, val, 0.95 + 0.01 * coarse), 0, 1)
    return quantize(hsv_to_rgb(hsv)), tumor.astype(np.uint8), tissue


@dataclass
class CohortParams:
    tumor_hue: float = 270.0
    tissue_hue: float = 330.0
    hue_spread: float = 20.0
    hue_shift: float = 40.0
    saturation: tuple = (0.45, 0.7)
    texture_scale: tuple = (1.0, 2.0)


@dataclass
class SlideCohort:
    manifest: SplitManifest
    slides: dict  # slide id -> SyntheticSlide

    kind = "cohort"

    def split_slides(self, split: str) -> list:
        return [self.slides[i] for i in self.manifest.split(split)]

    def annotated(self, split: str = "annotated_train") -> list:
        if split == "style_source":
            raise DataError("style-source slides carry no annotations")
        return self.split_slides(split)

    def style_pool(self) -> "SlidePool":
        return SlidePool([s.pixels_only() for s in self.split_slides("style_source")])


def _patient_style(rng, p: CohortParams, shift: float) -> dict:
    def hue(center):
        return float((center + shift + rng.uniform(-p.hue_spread, p.hue_spread)) % 360.0)
    return {"hue_deg": hue(p.tumor_hue), "background_hue": hue(p.tissue_hue),
            "saturation": float(rng.uniform(*p.saturation)),
            "texture_scale": float(rng.uniform(*p.texture_scale))}


def gen_slide_cohort(patients: int = 30, slide_size: int = 256, annotated: int = 4,
                     seed: int = 0, test_patients: int = 10, val_patients: int = 0,
                     params: Optional[CohortParams] = None) -> SlideCohort:
    """One slide per patient. The first ``annotated`` patients (after a
    seeded shuffle) keep their layouts; the rest become the style source.
    A separate test cohort is drawn from the style-source distribution.
    ``val_patients`` of the annotated patients go to the validation split.
    """
    if not 0 < annotated <= patients:
        raise ParameterError("need 0 < annotated <= patients")
    if val_patients >= annotated:
        raise ParameterError("validation patients must leave training patients")
    p = params or CohortParams()
    rng = np.random.default_rng(seed)
    order = rng.permutation(patients)
    annotated_set = set(order[:annotated].tolist())
    val_set = set(order[:val_patients].tolist())
    slides, items = {}, {}
    split_ids = {s: [] for s in SPLITS}
    total = patients + test_patients
    for k in range(total):
        is_test = k >= patients
        is_annot = not is_test and k in annotated_set
        style = _patient_style(rng, p, 0.0 if is_annot else p.hue_shift)
        pixels, layout, tissue = render_slide(slide_size, style, rng)
        sid = f"{'test' if is_test else 'patient'}-{k:03d}"
        slides[sid] = SyntheticSlide(sid, pixels, layout, tissue, sid, style)
        items[sid] = {"style_params": style}
        if is_test:
            split_ids["test"].append(sid)
        elif k in val_set:
            split_ids["annotated_val"].append(sid)
        elif is_annot:
            split_ids["annotated_train"].append(sid)
        else:
            split_ids["style_source"].append(sid)
    manifest = SplitManifest(
        kind="cohort", seed=seed,
        params={"patients": patients, "slide_size": slide_size, "annotated": annotated,
                "test_patients": test_patients, "val_patients": val_patients,
                "cohort": json.loads(json.dumps(asdict(p)))},
        items=items, **split_ids)
    manifest.check_disjoint()
    return SlideCohort(manifest, slides)


# --------------------------------------------------------------------------
# pools handed to generation: pixels only

class ImagePool:
    def __init__(self, ids: list, images: np.ndarray):
        self.ids = list(ids)
        self.images = np.asarray(images, np.float32)

    def __len__(self):
        return len(self.ids)


class SlidePool:
    def __init__(self, slides: list):
        self.slides = list(slides)

    def __len__(self):
        return len(self.slides)


# --------------------------------------------------------------------------
# oracle segmenters (ground-truth-aware, for evaluation only)

def segment_shapes(img: np.ndarray, sat_threshold: float = 0.35) -> np.ndarray:
    """Foreground of a shapes image: saturated pixels."""
    return to_hsv(img)[..., 1] > sat_threshold


def segment_slide(img: np.ndarray, style: dict) -> np.ndarray:
    """Tumour mask by nearest of the two known hues, inside tissue."""
    hsv = to_hsv(img)
    tissue = hsv[..., 1] > 0.15
    closer = hue_distance(hsv[..., 0], style["hue_deg"]) < hue_distance(hsv[..., 0], style["background_hue"])
    return tissue & closer


# --------------------------------------------------------------------------
# folder ingestion

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


def _fit(arr: np.ndarray, size: int, fill) -> np.ndarray:
    """Center-crop or pad the first two axes to ``size``."""
    out = np.full((size, size) + arr.shape[2:], fill, dtype=arr.dtype)
    h, w = arr.shape[:2]
    sy, sx = max(0, (h - size) // 2), max(0, (w - size) // 2)
    crop = arr[sy:sy + size, sx:sx + size]
    oy, ox = (size - crop.shape[0]) // 2, (size - crop.shape[1]) // 2
    out[oy:oy + crop.shape[0], ox:ox + crop.shape[1]] = crop
    return out


@dataclass
class FolderCorpus:
    manifest: SplitManifest
    images: dict  # id -> (S, S, 3) float32
    masks: dict   # id -> (S, S) uint8, annotated items only

    kind = "folder"

    def annotated(self, split: str = "annotated_train") -> tuple[np.ndarray, np.ndarray]:
        if split == "style_source":
            raise DataError("style-source items carry no annotations")
        ids = self.manifest.split(split)
        if not ids:
            return (np.zeros((0,) + next(iter(self.images.values())).shape, np.float32),
                    np.zeros((0, 0, 0), np.uint8))
        return np.stack([self.images[i] for i in ids]), np.stack([self.masks[i] for i in ids])

    def style_pool(self) -> ImagePool:
        ids = self.manifest.style_source
        return ImagePool(ids, np.stack([self.images[i] for i in ids]))


def ingest_folder(images_dir, masks_dir=None, patch_size: int = 16,
                  val_fraction: float = 0.1, seed: int = 0) -> FolderCorpus:
    """Load a folder of RGB images and optional same-named binary masks.

    Mask value 255 is class 1 (foreground/tumour) and 0 is class 0. Images
    with a mask become annotated (a ``val_fraction`` share goes to
    validation), the others the style source.
    """
    images_dir = Path(images_dir)
    for d in (images_dir, masks_dir):
        if d is not None and not Path(d).is_dir():
            raise DataError(f"{d} is not a directory")
    files = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found in {images_dir}")
    mask_files = {}
    if masks_dir is not None:
        mask_files = {p.stem: p for p in Path(masks_dir).iterdir()
                      if p.suffix.lower() in IMAGE_SUFFIXES}
    images, masks, items = {}, {}, {}
    annotated, style_source = [], []
    for f in files:
        try:
            with Image.open(f) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as exc:  # PIL raises several unrelated types
            raise DataError(f"cannot read image {f}: {exc}") from exc
        item_id = f.stem
        images[item_id] = from_uint8(_fit(rgb, patch_size, 255))
        items[item_id] = {"path": str(f)}
        if item_id in mask_files:
            mf = mask_files[item_id]
            try:
                with Image.open(mf) as im:
                    m = np.asarray(im.convert("L"), dtype=np.uint8)
            except Exception as exc:
                raise DataError(f"cannot read mask {mf}: {exc}") from exc
            if m.shape != rgb.shape[:2]:
                raise DataError(f"mask {mf} is {m.shape}, image {f} is {rgb.shape[:2]}")
            if not np.isin(m, (0, 255)).all():
                raise DataError(f"mask {mf} has values outside {{0, 255}}")
            masks[item_id] = _fit((m == 255).astype(np.uint8), patch_size, 0)
            items[item_id]["mask_path"] = str(mf)
            annotated.append(item_id)
        else:
            style_source.append(item_id)
    rng = np.random.default_rng(seed)
    n_val = int(round(val_fraction * len(annotated))) if len(annotated) > 1 else 0
    val_idx = set(rng.permutation(len(annotated))[:n_val].tolist())
    manifest = SplitManifest(
        kind="folder", seed=seed,
        params={"images_dir": str(images_dir), "masks_dir": None if masks_dir is None else str(masks_dir),
                "patch_size": patch_size, "val_fraction": val_fraction},
        annotated_train=[a for i, a in enumerate(annotated) if i not in val_idx],
        annotated_val=[a for i, a in enumerate(annotated) if i in val_idx],
        style_source=style_source, test=[], items=items)
    manifest.check_disjoint()
    return FolderCorpus(manifest, images, masks)
