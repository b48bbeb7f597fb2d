"""Class-balanced multi-level loss for side-output segmentation networks.

Crack pixels (minority) and non-crack pixels (majority) are weighted by
median frequency balancing over the training set:

    alpha_crack    = (p + q) / (2 p)
    alpha_noncrack = (p + q) / (2 q)

with ``p``/``q`` the crack/non-crack pixel counts. Losses are summed over
the pixels of each image and averaged over the batch (``reduction="sum"``),
or averaged over pixels too (``reduction="mean"``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    p: int
    q: int
    alpha_crack: float
    alpha_noncrack: float

    @classmethod
    def from_counts(cls, p: int, q: int) -> "ClassWeights":
        p, q = int(p), int(q)
        if p <= 0 or q <= 0:
            raise ValueError(f"degenerate class balance: crack pixels p={p}, non-crack pixels q={q}")
        return cls(p=p, q=q, alpha_crack=(p + q) / (2 * p), alpha_noncrack=(p + q) / (2 * q))

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls.from_counts(1, 1)

    def exact(self) -> tuple[Fraction, Fraction]:
        """The two weights as exact rationals."""
        return Fraction(self.p + self.q, 2 * self.p), Fraction(self.p + self.q, 2 * self.q)

    def save(self, path) -> None:
        payload = {"p": self.p, "q": self.q,
                   "alpha_crack": self.alpha_crack, "alpha_noncrack": self.alpha_noncrack}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ClassWeights":
        data = json.loads(Path(path).read_text())
        weights = cls.from_counts(data["p"], data["q"])
        if (weights.alpha_crack, weights.alpha_noncrack) != (data["alpha_crack"], data["alpha_noncrack"]):
            raise ValueError(f"{path}: stored alphas do not match counts p={data['p']}, q={data['q']}")
        return weights


@dataclass(frozen=True)
class LambdaWeights:
    lambdas: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.lambdas)
        if len(values) != 5:
            raise ValueError(f"expected 5 side-output weights, got {len(values)}")
        if any(v < 0 for v in values):
            raise ValueError(f"side-output weights must be nonnegative: {values}")
        object.__setattr__(self, "lambdas", values)

    def __iter__(self):
        return iter(self.lambdas)

    def __len__(self):
        return 5

    def __getitem__(self, i):
        return self.lambdas[i]


# The seven weightings compared in the lambda study; case 7 is the best one.
LAMBDA_CASES = {
    1: ("4.0", "2.0", "1.0", "0.5", "0.25"),
    2: ("9.0", "3.0", "1.0", "1/3", "1/9"),
    3: ("0.25", "0.5", "1.0", "2.0", "4.0"),
    4: ("1/9", "1/3", "1.0", "3.0", "9.0"),
    5: ("1.0", "1.0", "1.0", "1.0", "1.0"),
    6: ("0.3", "0.7", "1.0", "0.7", "0.3"),
    7: ("0.5", "1.0", "0.8", "0.5", "0.3"),
}
BEST_LAMBDA_CASE = 7


def _parse_weight(text: str) -> float:
    num, _, den = text.partition("/")
    return float(num) / float(den) if den else float(num)


def lambda_case(case_id: int) -> LambdaWeights:
    if case_id not in LAMBDA_CASES:
        raise ValueError(f"lambda case must be one of 1..7, got {case_id!r}")
    return LambdaWeights(tuple(_parse_weight(t) for t in LAMBDA_CASES[case_id]))


def lambda_case_label(case_id: int) -> str:
    """Human-readable tuple, e.g. ``(9.0, 3.0, 1.0, 1/3, 1/9)``."""
    lambda_case(case_id)
    return "(" + ", ".join(LAMBDA_CASES[case_id]) + ")"


def compute_class_weights(train_masks: Iterable) -> ClassWeights:
    """Median-frequency weights from the pixel counts of all training masks."""
    p = q = 0
    seen = False
    for mask in train_masks:
        arr = np.asarray(mask)
        crack = int(np.count_nonzero(arr))
        p += crack
        q += arr.size - crack
        seen = True
    if not seen:
        raise ValueError("no training masks given")
    return ClassWeights.from_counts(p, q)


def _weighted_bce(prob: torch.Tensor, gt: torch.Tensor, w: ClassWeights, reduction: str) -> torch.Tensor:
    if prob.shape != gt.shape:
        raise ValueError(f"shape mismatch: prob {tuple(prob.shape)} vs gt {tuple(gt.shape)}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = gt.to(p.dtype)
    per_pixel = -(w.alpha_noncrack * (1.0 - t) * torch.log1p(-p) + w.alpha_crack * t * torch.log(p))
    if per_pixel.dim() <= 2:
        per_image = per_pixel.sum() if reduction == "sum" else per_pixel.mean()
        return per_image
    flat = per_pixel.reshape(per_pixel.shape[0], -1)
    per_image = flat.sum(dim=1) if reduction == "sum" else flat.mean(dim=1)
    return per_image.mean()


def side_loss(prob, gt, w: ClassWeights, reduction: str = "sum") -> torch.Tensor:
    """Class-balanced cross-entropy of one side-output probability plane.

    ``prob`` and ``gt`` are (H, W) planes or (B, ...) batches; batches are
    reduced per image, then averaged.
    """
    return _weighted_bce(torch.as_tensor(prob), torch.as_tensor(gt), w, reduction)


def fused_loss(prob_fused, gt, w: ClassWeights, reduction: str = "sum") -> torch.Tensor:
    return _weighted_bce(torch.as_tensor(prob_fused), torch.as_tensor(gt), w, reduction)


def total_loss(
    side_probs: Sequence,
    fused_prob,
    gt,
    w: ClassWeights,
    lam,
    reduction: str = "sum",
) -> torch.Tensor:
    """Sum of lambda-weighted side losses plus the fused loss (pixel sum taken once)."""
    lam = lam if isinstance(lam, LambdaWeights) else LambdaWeights(tuple(lam))
    if len(side_probs) != 5:
        raise ValueError(f"expected 5 side outputs, got {len(side_probs)}")
    total = fused_loss(fused_prob, gt, w, reduction)
    for weight, prob in zip(lam, side_probs):
        total = total + weight * side_loss(prob, gt, w, reduction)
    return total
