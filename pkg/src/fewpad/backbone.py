"""Frozen convolutional feature extraction into a single embedding grid.

The default backbone is a torchvision ResNet18 truncated after layer3:
layer2 and layer3 activations are taken, layer3 is bilinearly upsampled to
layer2's spatial size, channels are concatenated, and (optionally) each
location is mean-aggregated over its 3x3 neighbourhood. Output grids are
float64; the backbone itself stays float32 and is never trained.

ImageNet weights are used when a local weights file is given or the
torchvision registry is reachable; otherwise the extractor falls back to a
deterministic seeded random initialisation (random conv features are still
effective local-contrast descriptors, and keep the repo self-contained).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class EmbeddingGrid:
    """An L_H x L_W grid of feature vectors plus its provenance."""

    values: torch.Tensor  # (L_H, L_W, D) float64
    stride: int
    space: str = "raw"  # "raw" | "adapted"

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"embedding grid must be (L_H, L_W, D), got {tuple(self.values.shape)}")
        if self.space not in ("raw", "adapted"):
            raise ValueError(f"unknown embedding space {self.space!r}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def grid_values(grid) -> torch.Tensor:
    """Accept an EmbeddingGrid or a raw (L_H, L_W, D) tensor."""
    return grid.values if isinstance(grid, EmbeddingGrid) else grid


def _seeded_reinit(model: nn.Module, seed: int) -> None:
    """Deterministically re-initialise conv/bn/linear weights from `seed`."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.copy_((torch.rand(m.weight.shape, generator=g) * 2 - 1) * bound)
                if m.bias is not None:
                    m.bias.zero_()


class _ResNet18Trunk(nn.Module):
    """ResNet18 up to layer3, exposing the selected intermediate layers."""

    LAYER_CHANNELS = {1: 64, 2: 128, 3: 256}
    LAYER_STRIDES = {1: 4, 2: 8, 3: 16}

    def __init__(self, layers: Sequence[int], weights: Optional[str], seed: int):
        super().__init__()
        import torchvision

        model = torchvision.models.resnet18(weights=None)
        if weights == "auto":
            try:
                model = torchvision.models.resnet18(
                    weights=torchvision.models.ResNet18_Weights.IMAGENET1K_V1
                )
                logger.info("resnet18: loaded torchvision pretrained weights")
            except Exception as exc:
                logger.warning(
                    "resnet18: pretrained weights unavailable (%s); "
                    "falling back to seeded random initialisation (seed=%d)",
                    exc,
                    seed,
                )
                _seeded_reinit(model, seed)
        elif weights in (None, "random"):
            _seeded_reinit(model, seed)
        else:  # local weights file
            state = torch.load(weights, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        self.layers = tuple(sorted(layers))
        if any(l not in self.LAYER_CHANNELS for l in self.layers) or len(self.layers) < 1:
            raise ValueError(f"resnet18 supports layers 1-3, got {layers}")
        self.stem = nn.Sequential(model.conv1, model.bn1, model.relu, model.maxpool)
        self.layer1 = model.layer1
        self.layer2 = model.layer2
        self.layer3 = model.layer3

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = {}
        x = self.stem(x)
        x = self.layer1(x)
        feats[1] = x
        if max(self.layers) >= 2:
            x = self.layer2(x)
            feats[2] = x
        if max(self.layers) >= 3:
            x = self.layer3(x)
            feats[3] = x
        return [feats[l] for l in self.layers]

    def strides(self) -> list[int]:
        return [self.LAYER_STRIDES[l] for l in self.layers]


class _TinyCnnTrunk(nn.Module):
    """Small seeded random CNN with the same two-scale contract; test/dev backbone."""

    def __init__(self, layers: Sequence[int], weights: Optional[str], seed: int):
        super().__init__()
        del layers, weights
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 24, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(24, 32, 3, stride=2, padding=1)
        _seeded_reinit(self, seed)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = F.leaky_relu(self.conv1(x), 0.1)
        f2 = F.leaky_relu(self.conv2(x), 0.1)
        f3 = F.leaky_relu(self.conv3(f2), 0.1)
        return [f2, f3]

    def strides(self) -> list[int]:
        return [4, 8]


_BACKBONES: dict[str, Callable[..., nn.Module]] = {
    "resnet18": _ResNet18Trunk,
    "tinycnn": _TinyCnnTrunk,
}


def register_backbone(name: str, builder: Callable[..., nn.Module]) -> None:
    """Register an alternate trunk. The builder gets (layers, weights, seed)
    and must return an nn.Module with forward(x)->list of feature maps and
    a strides() method (coarsest last)."""
    _BACKBONES[name] = builder


class FeatureExtractor:
    """Wraps a frozen trunk and aggregates its mid-level layers into one grid.

    Args:
        arch: registered backbone name (default "resnet18").
        layers: which trunk layers to concatenate (default (2, 3)).
        weights: "auto" (registry with random fallback), "random", or a
            path to a local state-dict file.
        seed: seed for the random fallback initialisation.
        neighborhood: odd window for per-location mean aggregation;
            0 or 1 disables it (the "paper-literal" setting).
    """

    def __init__(
        self,
        arch: str = "resnet18",
        layers: Sequence[int] = (2, 3),
        weights: Optional[str] = "auto",
        seed: int = 0,
        neighborhood: int = 3,
    ):
        if arch not in _BACKBONES:
            raise ValueError(f"unknown backbone {arch!r}; registered: {sorted(_BACKBONES)}")
        if neighborhood not in (0, 1) and neighborhood % 2 == 0:
            raise ValueError("neighborhood must be odd (or 0/1 to disable)")
        self.arch = arch
        self.layers = tuple(layers)
        self.neighborhood = neighborhood
        self.trunk = _BACKBONES[arch](layers=layers, weights=weights, seed=seed)
        self.trunk.eval()
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self._mean = torch.tensor(IMAGENET_MEAN, dtype=torch.float32).view(1, 3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD, dtype=torch.float32).view(1, 3, 1, 1)

    @property
    def out_dim(self) -> int:
        if not hasattr(self, "_out_dim"):
            with torch.no_grad():
                feats = self.trunk(torch.zeros(1, 3, 64, 64))
            self._out_dim = sum(f.shape[1] for f in feats)
        return self._out_dim

    def _forward(self, batch: torch.Tensor) -> torch.Tensor:
        feats = self.trunk((batch - self._mean) / self._std)
        target = feats[0].shape[-2:]
        aligned = [feats[0]] + [
            F.interpolate(f, size=target, mode="bilinear", align_corners=False) for f in feats[1:]
        ]
        out = torch.cat(aligned, dim=1)
        if self.neighborhood > 1:
            k = self.neighborhood
            out = F.avg_pool2d(out, kernel_size=k, stride=1, padding=k // 2, count_include_pad=False)
        return out

    def extract_batch(self, images: Sequence[np.ndarray]) -> list[EmbeddingGrid]:
        """Extract raw-space grids for a batch of (H, W, 3) arrays in [0, 1]."""
        if len(images) == 0:
            return []
        h, w = images[0].shape[:2]
        for im in images:
            if im.shape != (h, w, 3):
                raise ValueError("all images in a batch must share shape (H, W, 3)")
        batch = torch.from_numpy(np.stack([im.transpose(2, 0, 1) for im in images])).to(torch.float32)
        with torch.no_grad():
            out = self._forward(batch)
        if not torch.isfinite(out).all():
            raise RuntimeError(
                f"non-finite activations from backbone {self.arch} "
                f"(min={out.min().item()}, max={out.max().item()})"
            )
        stride = h // out.shape[-2]
        grids = out.to(torch.float64).permute(0, 2, 3, 1)
        return [EmbeddingGrid(values=g.contiguous(), stride=stride, space="raw") for g in grids]

    def extract(self, pixels: np.ndarray) -> EmbeddingGrid:
        """Extract one raw-space embedding grid from an (H, W, 3) array in [0, 1]."""
        return self.extract_batch([pixels])[0]
