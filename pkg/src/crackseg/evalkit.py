"""Segmentation metrics, threshold sweeps and guided-filter refinement.

Crack is the positive class throughout. Degenerate ratios follow fixed
conventions so every metric is defined for every input:

* precision is 1 when nothing is predicted crack,
* recall is 1 when there is no crack in the ground truth,
* F is 0 when precision + recall is 0,
* a class whose union is empty contributes IoU 1 to MIOU.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels

REPORT_SCHEMA = "crackseg.report/1"
DEFAULT_THRESHOLD = 0.48
DEFAULT_GF_RADIUS = 4
DEFAULT_GF_EPS = 1e-3
# windows whose guide variance is below this are treated as flat
_FLAT_VAR = 1e-14


def threshold_grid() -> np.ndarray:
    """The 99 thresholds 0.01, 0.02, ..., 0.99."""
    return np.arange(1, 100, dtype=np.float64) / 100.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


@dataclass
class SweepRow:
    m: float
    precision: float
    recall: float
    f: float


@dataclass
class MetricReport:
    accuracy: float
    miou: float
    ds: float
    is_score: float
    bp: float
    br: float
    best_threshold: float
    fixed_threshold: float
    n_images: int
    guided_filter: Optional[dict] = None
    sweep: list = field(default_factory=list)

    def to_json(self) -> str:
        payload = {"schema": REPORT_SCHEMA, **asdict(self)}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json())

    def write_sweep_csv(self, path) -> None:
        write_sweep_csv(self.sweep, path)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        schema = data.pop("schema", None)
        if schema != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {schema!r}, expected {REPORT_SCHEMA!r}")
        data["sweep"] = [SweepRow(**row) for row in data.get("sweep", [])]
        return cls(**data)


def write_sweep_csv(sweep: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["m", "precision", "recall", "f"])
        for row in sweep:
            writer.writerow([f"{row.m:.2f}", repr(row.precision), repr(row.recall), repr(row.f)])


def _as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got shape {arr.shape}")
    return arr.astype(bool)


def _as_prob(prob) -> np.ndarray:
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("probability plane contains non-finite values")
    return arr


def binarize(prob, m: float) -> np.ndarray:
    """Crack mask of pixels with probability >= ``m``."""
    if not 0.0 < m < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {m}")
    return (np.asarray(prob, dtype=np.float64) >= m).astype(np.uint8)


def confusion(pred, gt) -> ConfusionCounts:
    p = _as_mask(pred)
    t = _as_mask(gt)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs ground truth {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp=tp, tn=p.size - tp - fp - fn, fp=fp, fn=fn)


def precision_recall_f(counts: ConfusionCounts) -> tuple[float, float, float]:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    denom = precision + recall
    f = 2.0 * precision * recall / denom if denom else 0.0
    return precision, recall, f


def accuracy_miou(counts: ConfusionCounts) -> tuple[float, float]:
    total = counts.total
    if total <= 0:
        raise ValueError("accuracy of an empty evaluation is undefined")
    accuracy = (counts.tp + counts.tn) / total
    crack_union = counts.tp + counts.fp + counts.fn
    back_union = counts.tn + counts.fp + counts.fn
    iou_crack = counts.tp / crack_union if crack_union else 1.0
    iou_back = counts.tn / back_union if back_union else 1.0
    return accuracy, 0.5 * (iou_crack + iou_back)


def _check_aligned(probs, gts):
    if len(probs) != len(gts):
        raise ValueError(f"{len(probs)} probability planes but {len(gts)} ground-truth masks")
    if not len(probs):
        raise ValueError("no images to evaluate")
    for i, (p, g) in enumerate(zip(probs, gts)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"image {i}: probability shape {np.shape(p)} != mask shape {np.shape(g)}")


def _sweep_table(probs, gts, grid) -> np.ndarray:
    """Per-image sweep counts, shape (n_images, len(grid), 4) = tp, fp, fn, tn."""
    return np.stack([kernels.sweep_counts(_as_prob(p), _as_mask(g), grid) for p, g in zip(probs, gts)])


def _counts_row(row) -> ConfusionCounts:
    tp, fp, fn, tn = (int(v) for v in row)
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def _best_over_grid(count_rows, grid):
    """(best F, P, R, m) with ties resolved toward the smallest threshold."""
    best = None
    rows = []
    for m, row in zip(grid, count_rows):
        p, r, f = precision_recall_f(_counts_row(row))
        rows.append(SweepRow(m=float(m), precision=p, recall=r, f=f))
        if best is None or f > best[0]:
            best = (f, p, r, float(m))
    return best, rows


def dataset_best_f(probs, gts, grid=None):
    """Dataset-scale best F over a fixed threshold grid.

    Counts are summed over every image before P, R and F are formed.
    Returns ``(ds, bp, br, best_m, sweep)``.
    """
    _check_aligned(probs, gts)
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    totals = _sweep_table(probs, gts, grid).sum(axis=0)
    (ds, bp, br, m_best), sweep = _best_over_grid(totals, grid)
    return ds, bp, br, m_best, sweep


def image_best_f(probs, gts, grid=None) -> float:
    """Mean over images of each image's best F over the grid."""
    _check_aligned(probs, gts)
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    table = _sweep_table(probs, gts, grid)
    best = [_best_over_grid(per_image, grid)[0][0] for per_image in table]
    return float(sum(best) / len(best))


def guided_filter(prob, guide, radius: int = DEFAULT_GF_RADIUS, eps: float = DEFAULT_GF_EPS) -> np.ndarray:
    """Refine a probability plane with a grayscale guide image.

    Local linear model ``q = a * I + b`` fitted in every ``(2r+1)^2``
    window, then averaged over the windows covering each pixel. The result
    is clipped back to [0, 1].
    """
    p = np.asarray(prob, dtype=np.float64)
    guide_img = np.asarray(guide, dtype=np.float64)
    if p.shape != guide_img.shape:
        raise ValueError(f"shape mismatch: prob {p.shape} vs guide {guide_img.shape}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    box = kernels.box_mean
    mean_i = box(guide_img, radius)
    mean_p = box(p, radius)
    var_i = box(guide_img * guide_img, radius) - mean_i * mean_i
    cov_ip = box(guide_img * p, radius) - mean_i * mean_p
    denom = var_i + eps
    flat = denom <= _FLAT_VAR
    a = np.where(flat, 0.0, cov_ip / np.where(flat, 1.0, denom))
    b = mean_p - a * mean_i
    q = box(a, radius) * guide_img + box(b, radius)
    return np.clip(q, 0.0, 1.0)


def luma(image) -> np.ndarray:
    """Grayscale guide in [0, 1] from an RGB array (HxWx3, uint8 or float)."""
    img = np.asarray(image)
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def evaluate_dataset(
    probs,
    gts,
    guides=None,
    gf_params: Optional[dict] = None,
    fixed_m: float = DEFAULT_THRESHOLD,
    grid=None,
) -> MetricReport:
    """Score a set of probability planes against ground truth.

    Accuracy and MIOU use dataset-summed counts at ``fixed_m``; DS, BP,
    BR and IS come from the threshold sweep. When ``guides`` is given the
    planes are guided-filtered first (``gf_params`` may set ``radius`` and
    ``eps``).
    """
    _check_aligned(probs, gts)
    probs = [_as_prob(p) for p in probs]
    gf_used = None
    if guides is not None:
        if len(guides) != len(probs):
            raise ValueError(f"{len(guides)} guides for {len(probs)} images")
        params = {"radius": DEFAULT_GF_RADIUS, "eps": DEFAULT_GF_EPS, **(gf_params or {})}
        probs = [guided_filter(p, g, **params) for p, g in zip(probs, guides)]
        gf_used = params
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)

    fixed = ConfusionCounts(0, 0, 0, 0)
    for p, g in zip(probs, gts):
        fixed = fixed + confusion(binarize(p, fixed_m), g)
    accuracy, miou = accuracy_miou(fixed)

    table = _sweep_table(probs, gts, grid)
    (ds, bp, br, m_best), sweep = _best_over_grid(table.sum(axis=0), grid)
    per_image = [_best_over_grid(t, grid)[0][0] for t in table]
    return MetricReport(
        accuracy=accuracy,
        miou=miou,
        ds=ds,
        is_score=float(sum(per_image) / len(per_image)),
        bp=bp,
        br=br,
        best_threshold=m_best,
        fixed_threshold=float(fixed_m),
        n_images=len(probs),
        guided_filter=gf_used,
        sweep=sweep,
    )
