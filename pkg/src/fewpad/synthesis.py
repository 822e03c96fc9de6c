"""Synthetic training inputs: mild anatomical augmentation of clean images
and locally corrupted images with exact pixel masks.

Corruption pastes texture into a blobby region obtained by taking the
top-k foreground pixels of a multi-octave noise field (k drawn from the
configured area-fraction range), followed by a 3x3 binary opening. The
opening only shrinks the region, so the upper area bound always holds;
a shortfall below the lower bound triggers a fresh noise draw.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import TextureSource, sample_texture
from .noise import multi_octave_noise

logger = logging.getLogger(__name__)

FOREGROUND_FLOOR = 0.05  # mean intensity above which a pixel counts as anatomy
MAX_MASK_RETRIES = 10


@dataclass(frozen=True)
class AugmentSpec:
    """Mild affine + elastic deformation ranges (degrees, fractions, pixels)."""

    rotation_deg: float = 5.0
    translate_frac: float = 0.03
    scale_range: tuple[float, float] = (0.97, 1.03)
    shear_deg: float = 2.0
    elastic_alpha: float = 20.0
    elastic_sigma: float = 6.0
    p_affine: float = 1.0
    p_elastic: float = 0.5

    def __post_init__(self):
        if self.scale_range[0] > self.scale_range[1]:
            raise ValueError("scale range must be (lo, hi) with lo <= hi")
        for p in (self.p_affine, self.p_elastic):
            if not (0.0 <= p <= 1.0):
                raise ValueError("transform probabilities must be in [0, 1]")


@dataclass(frozen=True)
class LocalAnomalySpec:
    """Thresholded-noise mask shape and texture blend opacity."""

    beta_range: tuple[float, float] = (0.5, 1.0)
    area_range: tuple[float, float] = (0.01, 0.12)  # mask area as fraction of the image
    noise_octaves: int = 4
    noise_base_cells: int = 4

    def __post_init__(self):
        lo, hi = self.beta_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"beta range must satisfy 0 < lo <= hi <= 1, got {self.beta_range}")
        alo, ahi = self.area_range
        if not (0.0 < alo <= ahi < 1.0):
            raise ValueError(f"area range must lie in (0, 1), got {self.area_range}")


def _affine_matrix(rot_deg: float, shear_deg: float, scale: float) -> np.ndarray:
    th = np.deg2rad(rot_deg)
    sh = np.deg2rad(shear_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
    return rot @ shear * scale


def affine_warp(image: np.ndarray, rot_deg: float, shear_deg: float, scale: float, shift_px: tuple[float, float]) -> np.ndarray:
    """Affine warp about the image centre, bilinear, edge-padded."""
    h, w = image.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    fwd = _affine_matrix(rot_deg, shear_deg, scale)
    inv = np.linalg.inv(fwd)
    offset = center - inv @ (center + np.asarray(shift_px))
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            image[:, :, c], inv, offset=offset, order=1, mode="nearest"
        )
    return out


def elastic_warp(image: np.ndarray, alpha: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement field of amplitude `alpha` pixels."""
    h, w = image.shape[:2]
    dy = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma, mode="reflect")
    dx = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma, mode="reflect")
    for d in (dy, dx):
        peak = np.abs(d).max()
        if peak > 1e-12:
            d *= alpha / peak
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + dy, xx + dx])
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(image[:, :, c], coords, order=1, mode="nearest")
    return out


def augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Sampled affine then elastic deformation; identity when both
    probabilities are zero. Output stays in [0, 1] with the input shape."""
    h, w = image.shape[:2]
    out = image
    if rng.random() < spec.p_affine:
        rot = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
        shear = rng.uniform(-spec.shear_deg, spec.shear_deg)
        scale = rng.uniform(*spec.scale_range)
        shift = (
            rng.uniform(-spec.translate_frac, spec.translate_frac) * h,
            rng.uniform(-spec.translate_frac, spec.translate_frac) * w,
        )
        out = affine_warp(out, rot, shear, scale, shift)
    if rng.random() < spec.p_elastic:
        out = elastic_warp(out, spec.elastic_alpha, spec.elastic_sigma, rng)
    return np.clip(out, 0.0, 1.0) if out is not image else image


@dataclass(frozen=True)
class CorruptResult:
    image: np.ndarray  # (H, W, C) in [0, 1]
    mask: np.ndarray  # (H, W) uint8; 1 = synthetically corrupted
    beta: float
    empty: bool  # no usable mask could be drawn; image returned unmodified


def _draw_mask(
    shape: tuple[int, int], foreground: np.ndarray, spec: LocalAnomalySpec, rng: np.random.Generator
) -> np.ndarray:
    h, w = shape
    n_pixels = h * w
    target = int(round(rng.uniform(*spec.area_range) * n_pixels))
    target = min(target, int(foreground.sum()))
    if target < 1:
        return np.zeros(shape, dtype=bool)
    field = multi_octave_noise(shape, rng, octaves=spec.noise_octaves, base_cells=spec.noise_base_cells)
    field = np.where(foreground, field, -np.inf)
    order = np.argsort(field.ravel())[::-1]
    mask = np.zeros(n_pixels, dtype=bool)
    mask[order[:target]] = True
    mask = mask.reshape(shape)
    return ndimage.binary_opening(mask, structure=np.ones((3, 3), dtype=bool))


def corrupt(
    image: np.ndarray, texture: TextureSource, spec: LocalAnomalySpec, rng: np.random.Generator
) -> CorruptResult:
    """Blend texture into a noise-shaped region of the image.

    Outside the mask the output equals the input bit-exactly; inside,
    pixels are (1 - beta) * image + beta * texture with beta drawn once
    per image. Masks land on anatomy only (pixels above a small intensity
    floor). If no mask of sufficient area can be drawn after retries, the
    image is returned unmodified with an all-zero mask and `empty` set.
    """
    h, w = image.shape[:2]
    foreground = image.mean(axis=2) > FOREGROUND_FLOOR
    min_area = spec.area_range[0] * h * w
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(MAX_MASK_RETRIES):
        cand = _draw_mask((h, w), foreground, spec, rng)
        if cand.sum() >= min_area:
            mask = cand
            break
    beta = float(rng.uniform(*spec.beta_range))
    if not mask.any():
        logger.warning("anomaly mask came up empty after %d retries", MAX_MASK_RETRIES)
        return CorruptResult(image=image.copy(), mask=np.zeros((h, w), dtype=np.uint8), beta=beta, empty=True)
    tex = sample_texture(texture, image.shape, rng)
    blended = (1.0 - beta) * image + beta * tex
    out = np.where(mask[:, :, None], blended, image)
    return CorruptResult(image=out, mask=mask.astype(np.uint8), beta=beta, empty=False)
