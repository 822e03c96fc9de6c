"""Trainable feature adapter and per-location discriminator.

Both maps are location-wise: they apply one shared weight set to every
grid cell, so permuting cells commutes with either map. Parameters are
float64 (the nets are tiny; double precision keeps the loss and gradient
checks exact).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbone import EmbeddingGrid


@dataclass(frozen=True)
class AdapterSpec:
    in_dim: int
    out_dim: Optional[int] = None  # None -> in_dim
    bias: bool = True
    init_noise: float = 1e-3

    def resolved_out_dim(self) -> int:
        return self.in_dim if self.out_dim is None else self.out_dim


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_dim: int
    hidden: int = 1024
    depth: int = 2
    negative_slope: float = 0.2


class FeatureAdapter(nn.Module):
    """Shared affine 1x1 projection from raw space into the learned space.

    With out_dim == in_dim the weight starts at identity plus N(0, init_noise^2)
    perturbation, keeping raw-space anchors commensurate at step zero.
    """

    def __init__(self, spec: AdapterSpec, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.spec = spec
        out_dim = spec.resolved_out_dim()
        self.linear = nn.Linear(spec.in_dim, out_dim, bias=spec.bias).to(torch.float64)
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        with torch.no_grad():
            if out_dim == spec.in_dim:
                base = torch.eye(out_dim, dtype=torch.float64)
            else:
                base = torch.zeros(out_dim, spec.in_dim, dtype=torch.float64)
                bound = (1.0 / spec.in_dim) ** 0.5
                base.copy_((torch.rand(base.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
            noise = torch.randn(base.shape, generator=g, dtype=torch.float64) * spec.init_noise
            self.linear.weight.copy_(base + noise)
            if spec.bias:
                self.linear.bias.zero_()

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        if values.shape[-1] != self.spec.in_dim:
            raise ValueError(f"adapter expects dim {self.spec.in_dim}, got {values.shape[-1]}")
        return self.linear(values)

    def adapt(self, grid: EmbeddingGrid) -> EmbeddingGrid:
        """Project a raw grid into the learned (adapted) space."""
        if grid.space != "raw":
            raise ValueError(f"adapter expects a raw-space grid, got {grid.space!r}")
        return EmbeddingGrid(values=self.forward(grid.values), stride=grid.stride, space="adapted")


class Discriminator(nn.Module):
    """Per-location MLP mapping adapted vectors to pathology probabilities in (0, 1)."""

    def __init__(self, spec: DiscriminatorSpec, generator: Optional[torch.Generator] = None):
        super().__init__()
        if spec.depth < 1 or spec.hidden < 1:
            raise ValueError("discriminator needs depth >= 1 and hidden >= 1")
        self.spec = spec
        dims = [spec.in_dim] + [spec.hidden] * spec.depth
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.LeakyReLU(spec.negative_slope)]
        layers.append(nn.Linear(dims[-1], 1))
        self.body = nn.Sequential(*layers).to(torch.float64)
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        with torch.no_grad():
            for m in self.body:
                if isinstance(m, nn.Linear):
                    bound = (1.0 / m.in_features) ** 0.5
                    m.weight.copy_(
                        (torch.rand(m.weight.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound
                    )
                    m.bias.zero_()

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        if values.shape[-1] != self.spec.in_dim:
            raise ValueError(f"discriminator expects dim {self.spec.in_dim}, got {values.shape[-1]}")
        return torch.sigmoid(self.body(values).squeeze(-1))

    def discriminate(self, grid: EmbeddingGrid) -> torch.Tensor:
        """Score an adapted grid; returns (L_H, L_W) probabilities."""
        if grid.space != "adapted":
            raise ValueError(f"discriminator expects an adapted-space grid, got {grid.space!r}")
        return self.forward(grid.values)


def trainable_parameters(*modules: nn.Module) -> int:
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)
