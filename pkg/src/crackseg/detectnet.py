"""Patch-level crack / non-crack classification.

Backbones are the standard torchvision definitions with a 2-way head,
plus a small ``tiny`` CNN for CPU-scale runs. Training uses two
constant-rate phases (1e-3 then 3e-4 by default).
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .trainer import batch_indices

log = logging.getLogger(__name__)

BACKBONES = ("alexnet_like", "vgg16_like", "vgg19_like", "resnet_like", "tiny")
PROB_CLAMP = 1e-7
CUTOFF = 0.5


@dataclass
class DetectConfig:
    backbone: str = "resnet_like"
    input_size: int = 100
    lr_phase1: float = 1e-3
    lr_phase2: float = 3e-4
    phase_length: int = 250
    batch_size: int = 32
    pretrained_init: bool = False
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {', '.join(BACKBONES)}")
        if self.phase_length <= 0 or self.batch_size <= 0:
            raise ValueError("phase_length and batch_size must be positive")
        if self.input_size < 32:
            raise ValueError(f"input_size must be >= 32, got {self.input_size}")

    @property
    def total_iters(self) -> int:
        return 2 * self.phase_length


@dataclass
class DetectPrediction:
    p_crack: float
    label: str
    latency: float


class TinyDetector(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, 5, padding=2), nn.ReLU(inplace=True), nn.MaxPool2d(4),
            nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(inplace=True), nn.AdaptiveMaxPool2d(1),
        )
        self.classifier = nn.Linear(16, 2)

    def forward(self, x):
        return self.classifier(torch.flatten(self.features(x), 1))


def _torchvision_backbone(name: str) -> nn.Module:
    from torchvision import models

    if name == "alexnet_like":
        return models.alexnet(weights=None, num_classes=2)
    if name == "vgg16_like":
        return models.vgg16(weights=None, num_classes=2)
    if name == "vgg19_like":
        return models.vgg19(weights=None, num_classes=2)
    return models.resnet18(weights=None, num_classes=2)


class CrackDetector(nn.Module):
    """Maps (B, 3, H, W) images in [0, 1] to two class logits (non-crack, crack)."""

    def __init__(self, config: DetectConfig):
        super().__init__()
        self.config = config
        self.net = TinyDetector() if config.backbone == "tiny" else _torchvision_backbone(config.backbone)

    def forward(self, x):
        return self.net(x)

    def predict_proba(self, x) -> torch.Tensor:
        return torch.softmax(self.forward(x), dim=1)[:, 1]


def build_detector(config: DetectConfig | None = None, seed: int = 0) -> CrackDetector:
    config = config or DetectConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CrackDetector(config)
    if config.pretrained_init:
        path = Path(config.weights_path) if config.weights_path else None
        if path is None or not path.is_file():
            warnings.warn(
                f"pretrained weights not found ({config.weights_path!r}); using random normal init",
                RuntimeWarning,
                stacklevel=2,
            )
        else:
            state = torch.load(path, map_location="cpu", weights_only=True)
            missing, unexpected = model.net.load_state_dict(state, strict=False)
            log.info("loaded %s (missing %d, unexpected %d keys)", path, len(missing), len(unexpected))
    return model


def detect_loss(p, y) -> torch.Tensor:
    """Mean binary cross-entropy of crack probabilities ``p`` against labels ``y``."""
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    y = torch.as_tensor(y, dtype=p.dtype) if not torch.is_tensor(y) else y.to(p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: p {tuple(p.shape)} vs y {tuple(y.shape)}")
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def _label_value(label) -> int:
    if isinstance(label, str):
        if label not in ("crack", "non_crack"):
            raise ValueError(f"unknown patch label {label!r}")
        return int(label == "crack")
    return int(bool(label))


def patches_to_tensors(patches: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack patches (``Patch`` objects or ``(image, label)`` pairs) into tensors."""
    images, labels = [], []
    for item in patches:
        if hasattr(item, "pixels"):
            img, label = item.pixels, item.label
        else:
            img, label = item
        arr = np.asarray(img)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        scale = 255.0 if arr.dtype == np.uint8 else 1.0
        images.append(torch.from_numpy(arr.astype(np.float32) / scale).permute(2, 0, 1))
        labels.append(_label_value(label))
    return torch.stack(images), torch.tensor(labels, dtype=torch.float32)


def train_detector(model: CrackDetector, patches: Sequence, config: DetectConfig, seed: int = 0):
    """Run both learning-rate phases; returns ``(model, history)``.

    ``history`` holds one ``(iter, loss, lr)`` row per iteration.
    """
    x_all, y_all = patches_to_tensors(patches)
    if y_all.numel() == 0 or y_all.min() == y_all.max():
        raise ValueError("training patches must contain both crack and non-crack samples")
    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_phase1)
    history = []
    n = len(y_all)
    model.train()
    for step in range(config.total_iters):
        lr = config.lr_phase1 if step < config.phase_length else config.lr_phase2
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = batch_indices(step, n, config.batch_size, seed)
        loss = detect_loss(model.predict_proba(x_all[idx]), y_all[idx])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append((step, float(loss.detach()), lr))
    return model, history


@dataclass
class DetectMetrics:
    accuracy: float
    mean_latency_ms: float
    n_samples: int

    def to_json(self) -> str:
        import json

        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@torch.no_grad()
def predict_patches(model: CrackDetector, patches: Sequence, batch_size: int = 32) -> list:
    x_all, _ = patches_to_tensors(patches)
    model.eval()
    out = []
    for start in range(0, len(x_all), batch_size):
        t0 = time.perf_counter()
        probs = model.predict_proba(x_all[start:start + batch_size])
        per_sample = (time.perf_counter() - t0) * 1000.0 / len(probs)
        for p in probs.tolist():
            out.append(DetectPrediction(p_crack=p, label="crack" if p >= CUTOFF else "non_crack",
                                        latency=per_sample))
    return out


@torch.no_grad()
def evaluate_detector(model: CrackDetector, patches: Sequence, batch_size: int = 32) -> DetectMetrics:
    """Accuracy at the 0.5 cutoff (ties count as crack) and mean per-batch latency."""
    if not len(patches):
        raise ValueError("evaluation set is empty")
    x_all, y_all = patches_to_tensors(patches)
    model.eval()
    correct = 0
    latencies = []
    for start in range(0, len(x_all), batch_size):
        t0 = time.perf_counter()
        probs = model.predict_proba(x_all[start:start + batch_size])
        latencies.append((time.perf_counter() - t0) * 1000.0)
        pred = (probs >= CUTOFF).float()
        correct += int((pred == y_all[start:start + batch_size]).sum())
    return DetectMetrics(accuracy=correct / len(y_all), mean_latency_ms=float(np.mean(latencies)),
                         n_samples=len(y_all))


def save_detect_checkpoint(path, model: CrackDetector, iteration: int = 0, history=()) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {"detect_config": asdict(model.config), "iteration": int(iteration),
            "history": [[int(i), float(l), float(r)] for i, l, r in history]}
    ckpt.save(path, ckpt.DETECT_MAGIC, tensors, meta)


def load_detect_checkpoint(path) -> tuple[CrackDetector, dict]:
    tensors, meta = ckpt.load(path, ckpt.DETECT_MAGIC)
    cfg = DetectConfig(**{**meta["detect_config"], "pretrained_init": False})
    model = build_detector(cfg)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items()}, strict=True)
    return model, meta
