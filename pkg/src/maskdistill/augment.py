"""View generation: recorded random-resized crops, photometric jitter for the
teacher view, and patch masking for the student view."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from maskdistill.config import RunConfig
from maskdistill.errors import ShapeError

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class CropRecord:
    left: float
    top: float
    width: float
    height: float
    hflip: bool
    out_size: int


@dataclass(frozen=True)
class PatchMask:
    grid: np.ndarray  # G_h x G_w booleans, True = masked
    ratio: float
    patch_size: int

    @property
    def count(self) -> int:
        return int(self.grid.sum())


@dataclass
class View:
    image: np.ndarray  # H x W x C in [0, 1]
    crop: CropRecord
    mask: Optional[PatchMask] = None
    plain: Optional[np.ndarray] = None  # pre-mask pixels (reconstruction target)


@dataclass
class ViewPair:
    student_view: View
    teacher_view: View
    source_id: str


def sample_crop(rng: np.random.Generator, orig_size: tuple[int, int],
                scale_min: float, scale_max: float, out_size: int,
                scale_mode: str = "area") -> CropRecord:
    """Random resized crop with recorded geometry.

    Area fraction uniform in [scale_min, scale_max] (or side fraction in
    "side" mode), aspect ratio log-uniform in [3/4, 4/3]; falls back to the
    largest centered crop after 10 rejected aspect draws.
    """
    oh, ow = orig_size
    area = float(oh * ow)
    w = h = None
    for _ in range(10):
        frac = rng.uniform(scale_min, scale_max)
        target_area = frac * area if scale_mode == "area" else (frac ** 2) * area
        ar = math.exp(rng.uniform(math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])))
        cand_w = int(math.ceil(math.sqrt(target_area * ar)))
        cand_h = int(math.ceil(math.sqrt(target_area / ar)))
        if 0 < cand_w <= ow and 0 < cand_h <= oh:
            w, h = cand_w, cand_h
            break
    if w is None:
        side = min(oh, ow)
        w = h = side
        left = (ow - side) // 2
        top = (oh - side) // 2
    else:
        left = int(rng.integers(0, ow - w + 1))
        top = int(rng.integers(0, oh - h + 1))
    hflip = bool(rng.random() < 0.5)
    return CropRecord(left=float(left), top=float(top), width=float(w),
                      height=float(h), hflip=hflip, out_size=out_size)


def apply_crop(image: np.ndarray, crop: CropRecord) -> np.ndarray:
    """Extract the recorded rectangle, resize to out_size, apply the flip."""
    left, top = int(round(crop.left)), int(round(crop.top))
    w, h = int(round(crop.width)), int(round(crop.height))
    patch = image[top:top + h, left:left + w]
    if patch.shape[:2] != (crop.out_size, crop.out_size):
        img = Image.fromarray((patch * 255.0 + 0.5).astype(np.uint8))
        img = img.resize((crop.out_size, crop.out_size), Image.BILINEAR)
        patch = np.asarray(img, dtype=np.float64) / 255.0
    else:
        patch = patch.astype(np.float64, copy=True)
    if crop.hflip:
        patch = patch[:, ::-1].copy()
    return patch


def photometric(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """MoCo-v2-style jitter: brightness/contrast/saturation, random grayscale,
    random gaussian blur.  strength 0 is the identity."""
    if strength <= 0.0:
        return image
    out = image.astype(np.float64, copy=True)
    s = 0.4 * strength
    if rng.random() < 0.8:
        for op in rng.permutation(3):
            factor = 1.0 + rng.uniform(-s, s)
            if op == 0:  # brightness
                out = out * factor
            elif op == 1:  # contrast
                mean = out.mean()
                out = (out - mean) * factor + mean
            else:  # saturation
                gray = out.mean(axis=2, keepdims=True)
                out = (out - gray) * factor + gray
    if rng.random() < 0.2 * strength:
        out = np.repeat(out.mean(axis=2, keepdims=True), out.shape[2], axis=2)
    if rng.random() < 0.5 * strength:
        sigma = rng.uniform(0.1, 2.0)
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0))
    return np.clip(out, 0.0, 1.0)


def generate_mask(grid_h: int, grid_w: int, ratio: float,
                  rng: np.random.Generator) -> PatchMask:
    """Exactly round(ratio * cells) cells masked, uniform without replacement."""
    cells = grid_h * grid_w
    n_masked = int(round(ratio * cells))
    flat = np.zeros(cells, dtype=bool)
    chosen = rng.choice(cells, size=n_masked, replace=False)
    flat[chosen] = True
    return PatchMask(grid=flat.reshape(grid_h, grid_w), ratio=ratio, patch_size=0)


def _pixel_mask(mask: PatchMask, height: int, width: int, patch_size: int) -> np.ndarray:
    gh, gw = mask.grid.shape
    if gh * patch_size != height or gw * patch_size != width:
        raise ShapeError(f"mask grid {gh}x{gw} with patch {patch_size} does not tile {height}x{width}")
    return np.repeat(np.repeat(mask.grid, patch_size, axis=0), patch_size, axis=1)


def apply_mean_fill(view_pixels: np.ndarray, mask: PatchMask,
                    patch_size: int | None = None) -> np.ndarray:
    """Fill masked patches with the per-channel mean of the whole view."""
    ps = patch_size or mask.patch_size
    h, w, _ = view_pixels.shape
    pm = _pixel_mask(mask, h, w, ps)
    out = view_pixels.astype(np.float64, copy=True)
    out[pm] = view_pixels.reshape(-1, view_pixels.shape[2]).mean(axis=0)
    return out


def apply_zero_replace(view_pixels: np.ndarray, mask: PatchMask,
                       patch_size: int | None = None) -> np.ndarray:
    """Ablation strategy: masked patches set to zero."""
    ps = patch_size or mask.patch_size
    h, w, _ = view_pixels.shape
    pm = _pixel_mask(mask, h, w, ps)
    out = view_pixels.astype(np.float64, copy=True)
    out[pm] = 0.0
    return out


def crops_overlap(a: CropRecord, b: CropRecord) -> bool:
    iw = min(a.left + a.width, b.left + b.width) - max(a.left, b.left)
    ih = min(a.top + a.height, b.top + b.height) - max(a.top, b.top)
    return iw > 0 and ih > 0


def make_views(image: np.ndarray, cfg: RunConfig, rng: np.random.Generator,
               source_id: str = "") -> ViewPair:
    """Two recorded crops of one image: photometric teacher view and masked
    student view.  Crops are resampled until their rectangles intersect."""
    orig = image.shape[:2]
    for _ in range(1000):
        crop_s = sample_crop(rng, orig, cfg.scale_min, cfg.scale_max,
                             cfg.image_size, cfg.scale_mode)
        crop_t = sample_crop(rng, orig, cfg.scale_min, cfg.scale_max,
                             cfg.image_size, cfg.scale_mode)
        if crops_overlap(crop_s, crop_t):
            break
    else:
        raise RuntimeError("could not sample overlapping crops")

    teacher_pixels = photometric(apply_crop(image, crop_t),
                                 cfg.photometric_strength, rng)

    student_plain = apply_crop(image, crop_s)
    if cfg.student_photometric:
        student_plain = photometric(student_plain, cfg.photometric_strength, rng)
    grid = cfg.grid_size
    mask = PatchMask(grid=generate_mask(grid, grid, cfg.mask_ratio, rng).grid,
                     ratio=cfg.mask_ratio, patch_size=cfg.patch_size)
    if cfg.mask_strategy == "mean_add":
        student_pixels = apply_mean_fill(student_plain, mask)
    else:
        student_pixels = apply_zero_replace(student_plain, mask)

    return ViewPair(
        student_view=View(image=student_pixels, crop=crop_s, mask=mask, plain=student_plain),
        teacher_view=View(image=teacher_pixels, crop=crop_t),
        source_id=source_id,
    )


def pixel_mask_array(mask: PatchMask, image_size: int) -> np.ndarray:
    """Patch mask upsampled to pixel resolution (H x W booleans)."""
    return _pixel_mask(mask, image_size, image_size, mask.patch_size)
