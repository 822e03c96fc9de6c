"""Synthetic pathological embeddings via iterated normalized gradient ascent.

Starting from a Gaussian-perturbed copy of a non-pathological embedding,
the iterate climbs the global objective for T steps, moving exactly `eta`
in L2 norm per step (whole-tensor normalisation). Ascent simultaneously
makes the synthetic embedding look more normal to the discriminator and
pulls its mean anchor distance down, yielding hard near-normal negatives.
Model parameters and the source embedding are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .backbone import grid_values
from .bank import AnchorBank
from .losses import LossWeights, bce_loss, d_global, tritanh
from .network import Discriminator

GRAD_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class PiegConfig:
    """Perturbation schedule: T steps of strength eta from N(mu, scale^2 I) noise."""

    steps: int = 20
    noise_mean: float = 0.015
    noise_scale: float = 1.0
    eta: float = 0.01
    retain_noise: bool = True  # False reproduces the bare summed-gradient form

    def __post_init__(self):
        if self.steps < 0 or self.eta < 0:
            raise ValueError("steps and eta must be >= 0")


@dataclass
class GpeResult:
    embedding: torch.Tensor  # (L_H, L_W, D), detached
    initial: torch.Tensor  # the noise-perturbed starting point
    steps_taken: int
    degenerate: bool  # gradient norm underflowed before finishing


def init_gpe(nu_n, cfg: PiegConfig, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Perturb a non-pathological embedding with elementwise Gaussian noise."""
    values = grid_values(nu_n).detach()
    g = generator if generator is not None else torch.Generator().manual_seed(0)
    rho = cfg.noise_scale * (
        cfg.noise_mean + torch.randn(values.shape, generator=g, dtype=torch.float64)
    )
    return values + rho


def generate_gpe(
    nu_n,
    discriminator: Discriminator,
    bank: AnchorBank,
    weights: LossWeights,
    cfg: PiegConfig,
    generator: Optional[torch.Generator] = None,
    use_contrastive: bool = True,
) -> GpeResult:
    """Run the full T-step perturbation from a fresh noisy start.

    Each step evaluates the global objective of (nu_n, iterate), takes its
    gradient with respect to the iterate only, and moves eta along the
    unit gradient. A vanishing gradient stops early and flags the result.
    """
    source = grid_values(nu_n).detach()
    start = init_gpe(source, cfg, generator)
    x = start.clone().requires_grad_(True)
    degenerate = False
    steps_taken = 0
    # the source-side terms of the objective are constant along the ascent;
    # computing them once keeps the values exact and the gradient unchanged
    with torch.no_grad():
        bce_n_const = bce_loss(discriminator(source), 0.0)
        pull_const = d_global(source, bank) if use_contrastive else None
    with torch.enable_grad():  # callers may sit inside no_grad inference blocks
        for _ in range(cfg.steps):
            loss = bce_n_const + bce_loss(discriminator(x), 1.0)
            if use_contrastive:
                loss = loss + tritanh(pull_const, d_global(x, bank), weights)
            (grad,) = torch.autograd.grad(loss, x)
            norm = grad.norm()
            if norm < GRAD_NORM_FLOOR:
                degenerate = True
                break
            x = (x + cfg.eta * grad / norm).detach().requires_grad_(True)
            steps_taken += 1
    result = x.detach()
    if not cfg.retain_noise:
        result = source + (result - start)  # drop the initial noise, keep the summed steps
    return GpeResult(embedding=result, initial=start, steps_taken=steps_taken, degenerate=degenerate)
