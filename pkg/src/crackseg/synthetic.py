"""Synthetic crack images for tests, benchmarks and smoke runs."""
from __future__ import annotations

import cv2
import numpy as np


def crack_sample(size: int = 64, rng=None, n_cracks: int | None = None):
    """One (image uint8 HxWx3, mask uint8 HxW in {0,1}) pair.

    Concrete-like noisy gray background with dark random-walk cracks.
    """
    rng = np.random.default_rng(rng)
    base = rng.uniform(0.5, 0.7)
    texture = cv2.GaussianBlur(rng.normal(0.0, 0.06, (size, size)), (0, 0), 1.2)
    gray = base + texture + rng.normal(0.0, 0.02, (size, size))
    mask = np.zeros((size, size), np.uint8)
    for _ in range(n_cracks if n_cracks is not None else int(rng.integers(1, 3))):
        pts = [rng.uniform(0, size, 2)]
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(4, 8))):
            heading += rng.normal(0, 0.5)
            step = rng.uniform(size / 10, size / 5)
            pts.append(pts[-1] + step * np.array([np.cos(heading), np.sin(heading)]))
        poly = np.round(np.array(pts)).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(mask, [poly], False, 1, thickness=int(rng.integers(2, 4)))
    gray = np.where(mask > 0, rng.uniform(0.1, 0.25) + 0.3 * texture, gray)
    tint = np.array([1.0, 0.98, 0.95])
    image = np.clip(gray[..., None] * tint * 255.0, 0, 255).astype(np.uint8)
    return image, mask


def crack_set(n: int, size: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [crack_sample(size, rng) for _ in range(n)]


def line_patch(crack: bool, size: int = 100, rng=None):
    """Detection patch: a bright line on a dark background when ``crack``."""
    rng = np.random.default_rng(rng)
    img = rng.normal(40, 8, (size, size)).clip(0, 255)
    if crack:
        canvas = np.zeros((size, size), np.uint8)
        p0 = tuple(int(v) for v in rng.integers(0, size, 2))
        p1 = tuple(int(v) for v in rng.integers(0, size, 2))
        while abs(p0[0] - p1[0]) + abs(p0[1] - p1[1]) < size // 2:
            p1 = tuple(int(v) for v in rng.integers(0, size, 2))
        cv2.line(canvas, p0, p1, 1, thickness=3)
        img = np.where(canvas > 0, 220.0, img)
    return np.repeat(img.astype(np.uint8)[..., None], 3, axis=2)


def write_toy_dataset(root, n: int = 10, size: int = 64, seed: int = 0, mask_scale: int = 255):
    """Write ``n`` synthetic pairs in the images/ + masks/ layout under ``root``."""
    from pathlib import Path

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (image, mask) in enumerate(crack_set(n, size, seed)):
        cv2.imwrite(str(root / "images" / f"s{i:04d}.png"), cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(root / "masks" / f"s{i:04d}.png"), (mask * mask_scale).astype(np.uint8))
    return root
