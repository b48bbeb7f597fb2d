"""Feature-pyramid side-output segmentation network.

A 13-conv VGG-16-style backbone in five blocks (2, 2, 3, 3, 3 convs, each
conv + batch-norm + ReLU), 2x2 max-pooling after blocks 1-4 only. Every
block's last conv output is reduced to one channel by a 1x1 conv,
bilinearly upsampled (corner-aligned) to the input size, and the five
planes are fused by a 1x1 conv. Outputs are logits; ``predict_probability``
maps them to crack probabilities.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

BLOCK_CONVS = (2, 2, 3, 3, 3)
VGG16_WIDTHS = (64, 128, 256, 512, 512)
TINY_WIDTHS = (8, 16, 32, 64, 64)
INIT_STD = 0.01


@dataclass
class SegConfig:
    in_channels: int = 3
    block_channels: tuple = VGG16_WIDTHS
    use_batchnorm: bool = True
    input_size: int = 256

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) != 5:
            raise ValueError(f"block_channels needs 5 entries, got {self.block_channels}")
        if self.in_channels <= 0 or any(c <= 0 for c in self.block_channels):
            raise ValueError("channel counts must be positive")
        if self.input_size <= 0 or self.input_size % 16:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")

    @classmethod
    def tiny(cls, input_size: int = 64, **kw) -> "SegConfig":
        return cls(block_channels=TINY_WIDTHS, input_size=input_size, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass
class SideOutputBundle:
    """Side logits (5 planes) and fused logits, each shaped (B, 1, H, W)."""

    side: list
    fused: torch.Tensor
    taps: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.fused.shape[0]

    def planes(self) -> list:
        return [*self.side, self.fused]


class CrackNet(nn.Module):
    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = config.in_channels
        for n_convs, width in zip(BLOCK_CONVS, config.block_channels):
            layers = []
            for _ in range(n_convs):
                layers.append(nn.Conv2d(in_ch, width, 3, padding=1))
                if config.use_batchnorm:
                    layers.append(nn.BatchNorm2d(width))
                layers.append(nn.ReLU(inplace=True))
                in_ch = width
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)
        self.side_convs = nn.ModuleList(nn.Conv2d(w, 1, 1) for w in config.block_channels)
        self.fuse = nn.Conv2d(5, 1, 1)

    def forward(self, x: torch.Tensor) -> SideOutputBundle:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"spatial size {h}x{w} is not divisible by 16")
        taps = []
        feat = x
        for i, block in enumerate(self.blocks):
            feat = block(feat)
            taps.append(self.side_convs[i](feat))
            if i < 4:
                feat = F.max_pool2d(feat, 2)
        side = [
            t if t.shape[-2:] == (h, w)
            else F.interpolate(t, size=(h, w), mode="bilinear", align_corners=True)
            for t in taps
        ]
        fused = self.fuse(torch.cat(side, dim=1))
        return SideOutputBundle(side=side, fused=fused, taps=taps)

    def conv_layers(self) -> list:
        """Backbone convolutions in order (13 of them)."""
        return [m for block in self.blocks for m in block if isinstance(m, nn.Conv2d)]


def build_cracknet(config: SegConfig | None = None) -> CrackNet:
    return CrackNet(config or SegConfig())


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Zero-mean normal (std 0.01) conv weights, zero biases; deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                sample = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                module.weight.copy_(sample * INIT_STD)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
    return model


def predict_probability(bundle: SideOutputBundle) -> SideOutputBundle:
    """Logistic sigmoid of every plane (two-class softmax against a zero logit)."""
    for plane in bundle.planes():
        if not torch.isfinite(plane).all():
            raise ValueError("non-finite logits in side-output bundle")
    return SideOutputBundle(
        side=[torch.sigmoid(s) for s in bundle.side],
        fused=torch.sigmoid(bundle.fused),
        taps=bundle.taps,
    )


@torch.no_grad()
def infer_probabilities(model: CrackNet, images, which: str = "fused", batch_size: int = 4) -> list:
    """Eval-mode crack probabilities for (3, H, W) image tensors, as float64 numpy planes.

    ``which`` is ``"fused"`` or ``"side1"`` .. ``"side5"``.
    """
    if which != "fused" and which not in {f"side{i}" for i in range(1, 6)}:
        raise ValueError(f"unknown output plane {which!r}")
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.stack(list(images[start:start + batch_size]))
        probs = predict_probability(model(x))
        plane = probs.fused if which == "fused" else probs.side[int(which[-1]) - 1]
        out.extend(p[0].double().numpy() for p in plane)
    return out
