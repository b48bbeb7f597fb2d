"""Dataset ingestion: manifests, mask normalization, patches, augmentation.

Expected layout of a dataset root::

    <root>/images/<name>.png|.jpg
    <root>/masks/<name>.png        (single channel; 0 = background, 255 or 1 = crack)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)
IMAGE_EXTS = (".png", ".jpg", ".jpeg")
ROTATIONS = (0, 60, 120, 180, 240, 300)


class DatasetLayoutError(ValueError):
    """A dataset root or file does not follow the expected layout."""


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    mask_path: Optional[str]
    split: str
    source: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> str:
        return json.dumps({"image": self.image_path, "mask": self.mask_path,
                           "split": self.split, "source": self.source}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ImageRecord":
        d = json.loads(line)
        return cls(image_path=d["image"], mask_path=d.get("mask"), split=d["split"], source=d["source"])


@dataclass
class Patch:
    pixels: np.ndarray
    label: str
    origin: tuple

    @property
    def is_crack(self) -> bool:
        return self.label == "crack"


def read_image(path) -> np.ndarray:
    """RGB uint8 image; raises ``DatasetLayoutError`` if unreadable."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DatasetLayoutError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def read_mask(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetLayoutError(f"cannot read mask {path}")
    if raw.ndim == 3:
        # 3-channel files that are really gray are accepted
        if raw.shape[2] >= 3 and np.array_equal(raw[..., 0], raw[..., 1]) and np.array_equal(raw[..., 1], raw[..., 2]):
            raw = raw[..., 0]
        else:
            raise DatasetLayoutError(f"mask {path} is not single-channel")
    return normalize_mask(raw)


def normalize_mask(raw) -> np.ndarray:
    """Binary uint8 mask: inputs already in {0,1} pass through, others use > 127."""
    arr = np.asarray(raw)
    if arr.ndim != 2:
        raise ValueError(f"mask must be single-channel, got shape {arr.shape}")
    if np.isin(arr, (0, 1)).all():
        return arr.astype(np.uint8)
    return (arr > 127).astype(np.uint8)


def _largest_remainder(n: int, ratios: Sequence[float]) -> list:
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    leftovers = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in leftovers[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_counts(n: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> list:
    """Per-split counts by largest-remainder rounding (ties go to earlier splits)."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be 3 nonnegative fractions summing to 1, got {ratios}")
    return _largest_remainder(n, ratios)


def build_manifest(
    root_dir,
    split_ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    source: Optional[str] = None,
    labeled: bool = True,
    check_images: bool = True,
) -> list:
    """Pair images with masks under ``root_dir`` and assign splits.

    Records come back sorted by image name; the split of each record is
    drawn from a seeded shuffle.
    """
    root = Path(root_dir)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir():
        raise DatasetLayoutError(f"missing images directory {image_dir}")
    if labeled and not mask_dir.is_dir():
        raise DatasetLayoutError(f"missing masks directory {mask_dir}")
    counts = split_counts(0, split_ratios)  # validates ratios
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not images:
        raise DatasetLayoutError(f"no images found in {image_dir}")
    stems = [p.stem for p in images]
    if len(set(stems)) != len(stems):
        dup = sorted({s for s in stems if stems.count(s) > 1})[0]
        raise DatasetLayoutError(f"image name {dup!r} appears with more than one extension in {image_dir}")
    masks = []
    for img in images:
        mask = mask_dir / f"{img.stem}.png" if labeled else None
        if labeled and not mask.is_file():
            raise DatasetLayoutError(f"missing mask {mask} for image {img}")
        if check_images:
            image = read_image(img)
            if mask is not None:
                m = read_mask(mask)
                if m.shape != image.shape[:2]:
                    raise DatasetLayoutError(
                        f"mask {mask} is {m.shape[1]}x{m.shape[0]} but image is {image.shape[1]}x{image.shape[0]}"
                    )
        masks.append(mask)

    counts = split_counts(len(images), split_ratios)
    order = np.random.default_rng(seed).permutation(len(images))
    split_of = np.empty(len(images), dtype=object)
    start = 0
    for name, count in zip(SPLITS, counts):
        split_of[order[start:start + count]] = name
        start += count
    tag = source or root.name
    return [
        ImageRecord(str(img), str(mask) if mask else None, str(split_of[i]), tag)
        for i, (img, mask) in enumerate(zip(images, masks))
    ]


def write_manifest(records: Iterable[ImageRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path, split: Optional[str] = None) -> list:
    with open(path) as fh:
        records = [ImageRecord.from_json(line) for line in fh if line.strip()]
    return [r for r in records if split is None or r.split == split]


def crop_patches(image, mask, patch_size: int = 100, crack_threshold: float = 0.09) -> list:
    """Non-overlapping ``patch_size`` tiles; right/bottom remainders are dropped.

    A tile is ``crack`` when its crack-pixel fraction is strictly above
    ``crack_threshold``.
    """
    img = np.asarray(image)
    m = np.asarray(mask)
    if img.shape[:2] != m.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {m.shape} differ in size")
    if patch_size <= 0 or patch_size > min(m.shape):
        raise ValueError(f"patch_size {patch_size} does not fit a {m.shape[0]}x{m.shape[1]} image")
    area = patch_size * patch_size
    patches = []
    for r in range(0, m.shape[0] - patch_size + 1, patch_size):
        for c in range(0, m.shape[1] - patch_size + 1, patch_size):
            frac = np.count_nonzero(m[r:r + patch_size, c:c + patch_size]) / area
            patches.append(Patch(
                pixels=img[r:r + patch_size, c:c + patch_size].copy(),
                label="crack" if frac > crack_threshold else "non_crack",
                origin=(r, c),
            ))
    return patches


def write_patches(patches: Iterable[Patch], out_dir, stem: str) -> dict:
    out = Path(out_dir)
    counts = {"crack": 0, "non_crack": 0}
    for label in counts:
        (out / label).mkdir(parents=True, exist_ok=True)
    for patch in patches:
        r, c = patch.origin
        path = out / patch.label / f"{stem}_r{r:05d}_c{c:05d}.png"
        pixels = patch.pixels
        if pixels.ndim == 3:
            pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(path), pixels)
        counts[patch.label] += 1
    return counts


def _rotate(arr: np.ndarray, angle: int, interpolation: int) -> np.ndarray:
    if angle % 360 == 0:
        return arr.copy()
    if angle % 360 == 180:
        return np.ascontiguousarray(arr[::-1, ::-1])
    h, w = arr.shape[:2]
    # counter-clockwise about the pixel-grid centre
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, 1.0)
    return cv2.warpAffine(arr, matrix, (w, h), flags=interpolation, borderMode=cv2.BORDER_REFLECT_101)


def rotate_pair(image, mask, angle: int):
    return (_rotate(np.asarray(image), angle, cv2.INTER_LINEAR),
            _rotate(np.asarray(mask), angle, cv2.INTER_NEAREST))


def hflip(arr) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr)[:, ::-1])


def augment(image, mask) -> list:
    """Twelve variants: six rotations (0..300 by 60 degrees), each unflipped then flipped."""
    img = np.asarray(image)
    m = np.asarray(mask)
    if img.shape[:2] != m.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {m.shape} differ in size")
    out = []
    for angle in ROTATIONS:
        ri, rm = rotate_pair(img, m, angle)
        out.append((ri, rm))
        out.append((hflip(ri), hflip(rm)))
    return out


def resize_sample(image, mask, target: int = 256):
    """Bilinear image / nearest-neighbour mask resize to ``target`` x ``target``."""
    if target <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    img = np.asarray(image)
    m = np.asarray(mask)
    if img.size == 0 or m.size == 0:
        raise ValueError("cannot resize an empty sample")
    if img.shape[:2] == (target, target) and m.shape == (target, target):
        return img.copy(), m.copy()
    return (cv2.resize(img, (target, target), interpolation=cv2.INTER_LINEAR),
            cv2.resize(m, (target, target), interpolation=cv2.INTER_NEAREST))


def load_sample(record: ImageRecord, size: int):
    """(image uint8 HxWx3, mask uint8 HxW) resized to ``size``."""
    image = read_image(record.image_path)
    if record.mask_path is None:
        mask = np.zeros(image.shape[:2], np.uint8)
    else:
        mask = read_mask(record.mask_path)
    return resize_sample(image, mask, size)


def to_tensors(image, mask):
    """(3xHxW float32 in [0,1], HxW float32) tensors for the network."""
    import torch

    img = torch.from_numpy(np.ascontiguousarray(image).astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()
    return img, torch.from_numpy(np.asarray(mask).astype(np.float32))
