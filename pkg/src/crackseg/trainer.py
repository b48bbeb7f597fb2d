"""Segmentation training loop.

Adaptive-moment descent (AdamW) where the configured momentum is the
first-moment coefficient and the second-moment coefficient is 0.999.
Weight decay is decoupled and only applied to conv/linear weights.
The learning rate decays by ``decay_factor`` every ``decay_every`` steps.

Batch order is a pure function of ``(seed, step)``: the sample stream is the
concatenation of per-epoch permutations, so a run resumed from a
checkpoint at step k replays exactly the batches of an uninterrupted run.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .balancedloss import ClassWeights, LambdaWeights, lambda_case, total_loss
from .cracknet import CrackNet, SegConfig, SideOutputBundle, build_cracknet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 9e-5
    decay_factor: float = 0.8
    decay_every: int = 30_000
    total_iters: int = 240_000
    batch_size: int = 2
    momentum: float = 0.8
    weight_decay: float = 6e-4
    seed: int = 0
    checkpoint_every: int = 10_000

    def __post_init__(self):
        self.decay_every = int(self.decay_every)
        self.total_iters = int(self.total_iters)
        self.batch_size = int(self.batch_size)
        self.checkpoint_every = int(self.checkpoint_every)
        for name in ("base_lr", "decay_every", "total_iters", "batch_size", "momentum"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Short CPU schedule: 2,000 steps, decay every 500, base rate 1e-3.

        The higher rate compensates for the 120x shorter run; at 9e-5 the
        tiny model is still far from converged after 2,000 steps.
        """
        base = dict(base_lr=1e-3, total_iters=2_000, decay_every=500, checkpoint_every=500)
        base.update(kw)
        return cls(**base)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


def lr_at(iteration: int, config: TrainConfig) -> float:
    """``base_lr * decay_factor ** floor(iteration / decay_every)``.

    Evaluated in decimal so e.g. 9e-5 * 0.8**2 comes out as 5.76e-05
    rather than carrying binary rounding from the repeated product.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    k = int(iteration) // config.decay_every
    value = Decimal(repr(float(config.base_lr))) * Decimal(repr(float(config.decay_factor))) ** k
    return float(value)


@lru_cache(maxsize=64)
def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(step: int, n_samples: int, batch_size: int, seed: int) -> list:
    start = step * batch_size
    out = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n_samples)
        out.append(int(_epoch_order(seed, epoch, n_samples)[offset]))
    return out


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for module in model.modules():
        for name, param in module.named_parameters(recurse=False):
            if name == "weight" and isinstance(module, (nn.Conv2d, nn.Linear)):
                decay.append(param)
            else:
                no_decay.append(param)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=config.base_lr, betas=(config.momentum, 0.999), eps=1e-8)


def make_total_loss(weights: ClassWeights, lam: LambdaWeights | None = None, reduction: str = "sum"):
    """Loss closure ``(bundle, gt) -> scalar`` over sigmoid probabilities."""
    lam = lam or lambda_case(7)

    def loss_fn(bundle: SideOutputBundle, gt: torch.Tensor) -> torch.Tensor:
        side = [torch.sigmoid(s) for s in bundle.side]
        target = gt.reshape(bundle.fused.shape)
        return total_loss(side, torch.sigmoid(bundle.fused), target, weights, lam, reduction)

    return loss_fn


@dataclass
class TrainResult:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    step: int
    history: list = field(default_factory=list)


def save_seg_checkpoint(path, model: CrackNet, optimizer=None, step: int = 0,
                        history: Sequence = (), train_config: TrainConfig | None = None,
                        extra: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {
        "seg_config": model.config.to_dict(),
        "step": int(step),
        "history": [[int(i), float(l), float(r)] for i, l, r in history],
        "train_config": asdict(train_config) if train_config else None,
        "extra": extra or {},
    }
    if optimizer is not None:
        opt_tensors, opt_meta = ckpt.pack_optimizer(optimizer)
        tensors.update(opt_tensors)
        meta["optimizer"] = opt_meta
    ckpt.save(path, ckpt.SEG_MAGIC, tensors, meta)


@dataclass
class SegCheckpoint:
    model: CrackNet
    step: int
    history: list
    meta: dict
    tensors: dict

    def restore_optimizer(self, optimizer) -> None:
        if "optimizer" not in self.meta:
            raise ckpt.CheckpointError("checkpoint carries no optimizer state")
        optimizer.load_state_dict(ckpt.unpack_optimizer(self.tensors, self.meta["optimizer"]))


def load_seg_checkpoint(path) -> SegCheckpoint:
    tensors, meta = ckpt.load(path, ckpt.SEG_MAGIC)
    cfg = meta["seg_config"]
    model = build_cracknet(SegConfig(**cfg))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    history = [(int(i), float(l), float(r)) for i, l, r in meta["history"]]
    return SegCheckpoint(model=model, step=int(meta["step"]), history=history, meta=meta, tensors=tensors)


def checkpoint_roundtrip(model: CrackNet, path, optimizer=None, step: int = 0):
    """Save then reload; returns ``(model, optimizer, step)``.

    ``optimizer`` must come from ``make_optimizer``; the returned one is a
    fresh instance bound to the reloaded model with the saved moments.
    """
    save_seg_checkpoint(path, model, optimizer, step)
    loaded = load_seg_checkpoint(path)
    restored = None
    if optimizer is not None:
        restored = make_optimizer(loaded.model, TrainConfig())
        loaded.restore_optimizer(restored)
    return loaded.model, restored, loaded.step


def train_segmenter(
    model: CrackNet,
    dataset: Sequence,
    loss_fn: Callable,
    config: TrainConfig,
    *,
    checkpoint_path=None,
    resume_from=None,
    stop_at: Optional[int] = None,
    train_extra: dict | None = None,
) -> TrainResult:
    """Train ``model`` on ``dataset`` (sequence of ``(image, mask)`` tensors).

    ``resume_from`` is a checkpoint written by an earlier call; the model,
    optimizer moments, step counter and history are restored from it.
    ``stop_at`` ends the run early (after that many total steps), leaving
    a checkpoint a later call can resume.
    """
    if not len(dataset):
        raise ValueError("training split is empty")
    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    history: list = []
    start = 0
    if resume_from is not None:
        loaded = load_seg_checkpoint(resume_from)
        model.load_state_dict(loaded.model.state_dict())
        loaded.restore_optimizer(optimizer)
        history = list(loaded.history)
        start = loaded.step
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    n = len(dataset)
    model.train()
    for step in range(start, end):
        lr = lr_at(step, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = batch_indices(step, n, config.batch_size, config.seed)
        x = torch.stack([dataset[i][0] for i in idx])
        y = torch.stack([dataset[i][1] for i in idx])
        loss = loss_fn(model(x), y)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(step, value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append((step, value, lr))
        done = step + 1
        if checkpoint_path and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_seg_checkpoint(checkpoint_path, model, optimizer, done, history, config, train_extra)
        if done % 100 == 0:
            log.info("step %d loss %.4f lr %.3g", done, value, lr)
    if checkpoint_path:
        save_seg_checkpoint(checkpoint_path, model, optimizer, end, history, config, train_extra)
    return TrainResult(model=model, optimizer=optimizer, step=end, history=history)


def write_history_csv(history: Sequence, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "loss", "lr"])
        for i, loss, lr in history:
            writer.writerow([i, repr(float(loss)), repr(float(lr))])


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iter"]), float(r["loss"]), float(r["lr"])) for r in rows]
