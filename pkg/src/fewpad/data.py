"""Dataset ingestion, texture sources, and the synthetic toy dataset.

Folder layout understood by :func:`load_dataset`::

    root/train/good/*.png|jpg
    root/test/good/*.png|jpg
    root/test/bad/*.png|jpg
    root/test/bad_masks/<same-stem>.png   (nonzero = pathological)

All loaded pixel grids are float64 in [0, 1], H x W x 3 (grayscale inputs
are replicated to 3 channels so they match pretrained extractor input).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import binary_dilation

from .noise import multi_octave_noise, normalized_noise

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class ImageSample:
    """One image with optional ground-truth mask and binary label."""

    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]
    mask: Optional[np.ndarray] = None  # (H, W) uint8 {0, 1}
    label: Optional[int] = None  # 1 = pathological
    id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3:
            raise ValueError(f"sample {self.id!r}: pixels must be H x W x C, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError(f"sample {self.id!r}: non-finite pixel values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"sample {self.id!r}: pixel values outside [0, 1]")
        if self.mask is not None:
            if self.mask.shape != px.shape[:2]:
                raise ValueError(
                    f"sample {self.id!r}: mask shape {self.mask.shape} != image shape {px.shape[:2]}"
                )
            if self.mask.any() and self.label == 0:
                raise ValueError(f"sample {self.id!r}: nonempty mask but label 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def load_image(path: Path) -> np.ndarray:
    """Read an image file as (H, W, 3) float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_mask(path: Path) -> np.ndarray:
    """Read a mask file as (H, W) uint8 in {0, 1} (nonzero = pathological)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.uint8)


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def load_dataset(root: Path | str, split: str) -> list[ImageSample]:
    """Load one split of a dataset folder, sorted by sample id.

    Train samples carry no masks; test samples from ``bad/`` are paired
    with a mask from ``bad_masks/`` when a file with the same stem exists.
    Unreadable images are skipped with a warning and recorded in the
    manifest written next to the split folder; a mask/image shape mismatch
    is fatal for that pair.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")

    sources: list[tuple[Path, Optional[Path], int]] = []
    if split == "train":
        for p in _list_images(root / "train" / "good"):
            sources.append((p, None, 0))
    else:
        for p in _list_images(root / "test" / "good"):
            sources.append((p, None, 0))
        mask_dir = root / "test" / "bad_masks"
        for p in _list_images(root / "test" / "bad"):
            mask_path = None
            if mask_dir.is_dir():
                candidates = [q for q in _list_images(mask_dir) if q.stem == p.stem]
                mask_path = candidates[0] if candidates else None
            sources.append((p, mask_path, 1))

    samples: list[ImageSample] = []
    manifest: dict = {"root": str(root), "split": split, "samples": [], "skipped": []}
    for img_path, mask_path, label in sources:
        sample_id = f"{split}/{img_path.parent.name}/{img_path.stem}"
        try:
            pixels = load_image(img_path)
        except Exception as exc:  # unreadable file: skip, record
            logger.warning("skipping unreadable image %s: %s", img_path, exc)
            manifest["skipped"].append({"path": str(img_path), "reason": str(exc)})
            continue
        mask = None
        if mask_path is not None:
            mask = load_mask(mask_path)
            if mask.shape != pixels.shape[:2]:
                raise ValueError(
                    f"mask {mask_path} shape {mask.shape} does not match image {img_path} shape {pixels.shape[:2]}"
                )
        samples.append(ImageSample(pixels=pixels, mask=mask, label=label, id=sample_id))
        manifest["samples"].append(
            {"id": sample_id, "shape": list(pixels.shape), "has_mask": mask is not None, "label": label}
        )

    samples.sort(key=lambda s: s.id)
    manifest["samples"].sort(key=lambda r: r["id"])
    if not samples:
        logger.warning("no images found for split %r under %s", split, root)
    try:
        (root / f"manifest-{split}.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        logger.warning("could not write manifest under %s: %s", root, exc)
    return samples


# ---------------------------------------------------------------------------
# texture sources


@dataclass(frozen=True)
class TextureSource:
    """Where synthetic-anomaly texture patches come from.

    kind "folder" crops/resizes a randomly chosen image file from
    ``folder``; kind "procedural" composes multi-octave gradient noise and
    needs no external data.
    """

    kind: str = "procedural"  # "folder" | "procedural"
    folder: Optional[Path] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("folder", "procedural"):
            raise ValueError(f"unknown texture source kind {self.kind!r}")
        if self.kind == "folder" and self.folder is None:
            raise ValueError("folder texture source needs a folder path")


def _procedural_texture(shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    h, w, c = shape
    chans = [normalized_noise((h, w), rng, octaves=4, base_cells=4) for _ in range(c)]
    return np.stack(chans, axis=-1)


def _crop_or_resize(arr: np.ndarray, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    ah, aw = arr.shape[:2]
    if ah >= h and aw >= w:
        top = int(rng.integers(0, ah - h + 1))
        left = int(rng.integers(0, aw - w + 1))
        return arr[top : top + h, left : left + w]
    return resize_image(arr, (h, w))


def sample_texture(
    src: TextureSource, shape: tuple[int, int, int], rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Draw one texture patch in [0, 1] of the requested (H, W, C) shape."""
    if min(shape) < 1:
        raise ValueError(f"texture shape must be positive, got {shape}")
    if rng is None:
        rng = np.random.default_rng(src.seed)
    h, w, c = shape
    if src.kind == "folder":
        files = _list_images(Path(src.folder))
        if not files:
            logger.warning("texture folder %s is empty; falling back to procedural noise", src.folder)
            return _procedural_texture(shape, rng)
        path = files[int(rng.integers(0, len(files)))]
        arr = load_image(path)
        patch = _crop_or_resize(arr, h, w, rng)
        if c == 1:
            patch = patch.mean(axis=-1, keepdims=True)
        return np.clip(patch[:, :, :c], 0.0, 1.0)
    return _procedural_texture(shape, rng)


# ---------------------------------------------------------------------------
# resizing / working-resolution preprocessing


@dataclass(frozen=True)
class ContentBox:
    """Placement of the (aspect-preserved) image content inside the square canvas."""

    top: int
    left: int
    height: int
    width: int
    source_shape: tuple[int, int]


def resize_image(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W[, C]) array in [0, 1], antialiased."""
    squeeze = pixels.ndim == 2
    arr = pixels[:, :, None] if squeeze else pixels
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].to(torch.float64)
    out = torch.nn.functional.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    res = out[0].numpy().transpose(1, 2, 0)
    res = np.clip(res, 0.0, 1.0)
    return res[:, :, 0] if squeeze else res


def preprocess_to_square(pixels: np.ndarray, resolution: int) -> tuple[np.ndarray, ContentBox]:
    """Resize with preserved aspect to fit a square canvas, edge-padding the rest."""
    h, w = pixels.shape[:2]
    scale = resolution / max(h, w)
    nh = max(1, round(h * scale))
    nw = max(1, round(w * scale))
    resized = resize_image(pixels, (nh, nw))
    top = (resolution - nh) // 2
    left = (resolution - nw) // 2
    canvas = np.empty((resolution, resolution, pixels.shape[2]), dtype=np.float64)
    canvas[:] = 0.0
    canvas[top : top + nh, left : left + nw] = resized
    # edge-pad vertically then horizontally
    if top > 0:
        canvas[:top] = canvas[top]
        canvas[top + nh :] = canvas[top + nh - 1]
    if left > 0:
        canvas[:, :left] = canvas[:, left : left + 1]
        canvas[:, left + nw :] = canvas[:, left + nw - 1 : left + nw]
    return canvas, ContentBox(top=top, left=left, height=nh, width=nw, source_shape=(h, w))


def restore_from_square(scores: np.ndarray, box: ContentBox) -> np.ndarray:
    """Crop the content box out of a square score map and resize to the source shape."""
    crop = scores[box.top : box.top + box.height, box.left : box.left + box.width]
    return resize_image(crop, box.source_shape)


# ---------------------------------------------------------------------------
# synthetic toy dataset


@dataclass(frozen=True)
class ToySpec:
    """Configuration of the deterministic desk-scale toy dataset."""

    image_size: int = 64
    k_train: int = 2
    n_normal_test: int = 10
    n_anomalous_test: int = 10
    blob_area_range: tuple[int, int] = (30, 160)
    max_blobs: int = 2
    texture_amplitude: float = 0.08

    def __post_init__(self):
        lo, hi = self.blob_area_range
        if not (0 < lo <= hi < self.image_size * self.image_size):
            raise ValueError(f"invalid blob area range {self.blob_area_range}")
        if self.image_size < 8 or self.k_train < 1 or self.max_blobs < 1:
            raise ValueError("invalid toy spec")


def _toy_background(size: int, rng: np.random.Generator, texture_amplitude: float) -> np.ndarray:
    """Smooth radial gradient plus low-amplitude texture, clipped to [0.05, 0.95].

    Per-image variation (centre shift, brightness jitter, texture draw) is
    kept small so a 2-shot training set plausibly covers the normal class.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-size * 0.02, size * 0.02)
    cx = size / 2 + rng.uniform(-size * 0.02, size * 0.02)
    r = np.hypot(yy - cy, xx - cx) / (size * 0.75)
    base = 0.72 - 0.5 * r**2 + rng.uniform(-0.02, 0.02)
    tex = multi_octave_noise((size, size), rng, octaves=3, base_cells=3)
    gray = np.clip(base + texture_amplitude * tex, 0.05, 0.95)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _place_blob(
    size: int, area: int, occupied: np.ndarray, rng: np.random.Generator
) -> Optional[np.ndarray]:
    """Rasterise one elliptical blob of exactly `area` pixels avoiding `occupied`."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(20):
        cy = rng.uniform(size * 0.2, size * 0.8)
        cx = rng.uniform(size * 0.2, size * 0.8)
        aspect = rng.uniform(0.5, 2.0)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        # smooth unimodal bump; its top-k level set is connected
        bump = -(u**2 * aspect + v**2 / aspect)
        order = np.argsort(bump.ravel())[::-1]
        mask = np.zeros(size * size, dtype=bool)
        mask[order[:area]] = True
        mask = mask.reshape(size, size)
        # keep blobs separated so connected components keep their exact area
        if not (binary_dilation(mask, iterations=2) & occupied).any():
            return mask
    return None


def toy_rng(seed: int, *key: int) -> np.random.Generator:
    """Per-image substream of the toy generator (exposed so tests can
    regenerate any image's clean twin)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,) + key))


def make_toy_dataset(cfg: ToySpec, seed: int) -> tuple[list[ImageSample], list[ImageSample]]:
    """Deterministic toy dataset: clean structured backgrounds, plus test
    images with injected high-contrast blobs and exact ground-truth masks."""
    size = cfg.image_size

    train = [
        ImageSample(
            pixels=_toy_background(size, toy_rng(seed, 0, i), cfg.texture_amplitude),
            label=0,
            id=f"train/good/{i:04d}",
        )
        for i in range(cfg.k_train)
    ]

    test: list[ImageSample] = []
    for i in range(cfg.n_normal_test):
        test.append(
            ImageSample(
                pixels=_toy_background(size, toy_rng(seed, 1, i), cfg.texture_amplitude),
                label=0,
                id=f"test/good/{i:04d}",
            )
        )
    lo, hi = cfg.blob_area_range
    for i in range(cfg.n_anomalous_test):
        rng = toy_rng(seed, 2, i)
        pixels = _toy_background(size, rng, cfg.texture_amplitude)
        mask = np.zeros((size, size), dtype=np.uint8)
        n_blobs = int(rng.integers(1, cfg.max_blobs + 1))
        for _ in range(n_blobs):
            area = int(rng.integers(lo, hi + 1))
            blob = _place_blob(size, area, mask.astype(bool), rng)
            if blob is None:
                continue
            mask[blob] = 1
        if not mask.any():
            # placement against an empty occupancy map always succeeds
            mask[_place_blob(size, lo, np.zeros((size, size), dtype=bool), rng)] = 1
        # high-contrast injection: push away from the local intensity,
        # so every masked pixel changes and no unmasked pixel does
        contrast = rng.uniform(0.25, 0.45)
        direction = np.where(pixels[:, :, :1] < 0.5, 1.0, -1.0)
        altered = np.clip(pixels + contrast * direction, 0.0, 1.0)
        pixels = np.where(mask[:, :, None].astype(bool), altered, pixels)
        test.append(ImageSample(pixels=pixels, mask=mask, label=1, id=f"test/bad/{i:04d}"))

    test.sort(key=lambda s: s.id)
    return train, test


def save_image(path: Path, pixels: np.ndarray) -> None:
    """Write an (H, W, C) or (H, W) array in [0, 1] as an 8-bit PNG."""
    arr = np.clip(pixels, 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def write_dataset(train: Sequence[ImageSample], test: Sequence[ImageSample], root: Path | str) -> None:
    """Materialise samples on disk in the documented folder layout."""
    root = Path(root)
    for sub in ("train/good", "test/good", "test/bad", "test/bad_masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in train:
        save_image(root / "train" / "good" / (Path(s.id).stem + ".png"), s.pixels)
    for s in test:
        kind = "bad" if s.label == 1 else "good"
        stem = Path(s.id).stem
        save_image(root / "test" / kind / (stem + ".png"), s.pixels)
        if s.mask is not None and s.label == 1:
            save_image(root / "test" / "bad_masks" / (stem + ".png"), s.mask.astype(np.float64))
