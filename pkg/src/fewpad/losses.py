"""Loss components: masked/global anchor distances, the bounded pull/push
contrastive loss ("tritanh"), focal and BCE terms, and their composition
into the local, global, and total training objectives.

Conventions baked in here (also part of the public contract):
  * the masked distance averages nearest-anchor distances over masked
    cells only, normalised by the mask sum; an all-zero mask yields 0 and
    the item is excluded from the local contrastive average;
  * the mask is brought to grid resolution by area-averaging followed by
    a strict ">" threshold on the coverage fraction;
  * BCE and focal terms are cell-averaged; probabilities are clamped to
    [1e-7, 1 - 1e-7] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import grid_values
from .bank import AnchorBank, nearest_distance

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Scaling of the pull/push forces plus focal-loss shape parameters."""

    lambda_pull: float = 1.0
    lambda_push: float = 1.0
    eps: float = 1e-6
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.lambda_pull <= 0 or self.lambda_push <= 0:
            raise ValueError("pull/push scales must be > 0")
        if self.eps < 0 or self.focal_gamma < 0:
            raise ValueError("eps and focal gamma must be >= 0")
        if not (0.0 < self.focal_alpha < 1.0):
            raise ValueError("focal alpha must be in (0, 1)")


@dataclass(frozen=True)
class LossReport:
    """Per-step scalar record of every loss component."""

    total: float
    l_local: float
    l_global: float
    l_lc: float
    l_gc: float
    focal: float
    bce_n: float
    bce_s: float

    def as_line(self, step: int) -> str:
        return (
            f"step={step} total={self.total:.10g} l_local={self.l_local:.10g} "
            f"l_global={self.l_global:.10g} l_lc={self.l_lc:.10g} l_gc={self.l_gc:.10g} "
            f"focal={self.focal:.10g} bce_n={self.bce_n:.10g} bce_s={self.bce_s:.10g}"
        )

    def finite(self) -> bool:
        return all(
            np.isfinite(v)
            for v in (self.total, self.l_local, self.l_global, self.l_lc, self.l_gc, self.focal, self.bce_n, self.bce_s)
        )


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64) if x.dtype != torch.float64 else x
    return torch.as_tensor(x, dtype=torch.float64)


def tritanh(d_pull, d_push, weights: LossWeights) -> torch.Tensor:
    """Bounded pull/push contrastive value in (-1, 1].

    Computes (e^{l0*d_pull} - e^{l1*d_push} + eps) / (e^{l0*d_pull} +
    e^{l1*d_push} + eps) in a max-subtracted form, so it never overflows
    and never returns NaN for finite inputs. With eps = 0 this equals
    tanh((l0*d_pull - l1*d_push) / 2) identically.
    """
    a = weights.lambda_pull * _as_tensor(d_pull)
    b = weights.lambda_push * _as_tensor(d_push)
    m = torch.maximum(a, b)
    ea = torch.exp(a - m)
    eb = torch.exp(b - m)
    ee = weights.eps * torch.exp(-m)
    return (ea - eb + ee) / (ea + eb + ee)


def d_local(grid, mask: torch.Tensor, bank: AnchorBank) -> tuple[torch.Tensor, bool]:
    """Mean nearest-anchor distance over masked cells.

    Returns (value, valid); an all-zero mask gives (0, False) so the item
    can be excluded from the local contrastive term instead of dividing
    by zero.
    """
    values = grid_values(grid)
    mask = _as_tensor(mask)
    if mask.shape != values.shape[:2]:
        raise ValueError(f"mask shape {tuple(mask.shape)} != grid shape {tuple(values.shape[:2])}")
    total = mask.sum()
    if total.item() == 0:
        return torch.zeros((), dtype=torch.float64), False
    d = nearest_distance(bank, values)
    return (mask * d).sum() / total, True


def d_global(grid, bank: AnchorBank) -> torch.Tensor:
    """Mean nearest-anchor distance over all grid cells."""
    return nearest_distance(bank, grid_values(grid)).mean()


def focal_loss(scores: torch.Tensor, target: torch.Tensor, gamma: float, alpha: float) -> torch.Tensor:
    """Cell-averaged focal loss on probability scores against a binary target."""
    p = _as_tensor(scores).clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = _as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"scores shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    p_t = torch.where(t > 0.5, p, 1.0 - p)
    alpha_t = torch.where(t > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def bce_loss(scores: torch.Tensor, target_value: float) -> torch.Tensor:
    """Cell-averaged binary cross-entropy against a constant 0/1 target."""
    p = _as_tensor(scores).clamp(PROB_EPS, 1.0 - PROB_EPS)
    if target_value not in (0.0, 1.0, 0, 1):
        raise ValueError(f"BCE target must be 0 or 1, got {target_value}")
    return -torch.log(p).mean() if target_value else -torch.log(1.0 - p).mean()


def downsample_mask(mask: np.ndarray | torch.Tensor, grid_shape: tuple[int, int], overlap: float = 0.3) -> torch.Tensor:
    """Area-average a full-resolution binary mask onto the grid, then mark
    cells whose coverage exceeds `overlap` (strict)."""
    m = _as_tensor(np.asarray(mask, dtype=np.float64) if not isinstance(mask, torch.Tensor) else mask)
    pooled = F.adaptive_avg_pool2d(m[None, None], grid_shape)[0, 0]
    return (pooled > overlap).to(torch.float64)


def local_loss(
    disc_scores_p: torch.Tensor,
    mask_down: torch.Tensor,
    nu_n,
    nu_p,
    bank: AnchorBank,
    weights: LossWeights,
    use_contrastive: bool = True,
    pull_mask: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, dict]:
    """Per-sample local objective: focal on the corrupted scores plus the
    masked pull/push contrastive term. Empty-mask items contribute the
    focal term only. `pull_mask` overrides the mask used on the clean
    embedding (the all-ones-mask reading of the pull term)."""
    focal = focal_loss(disc_scores_p, mask_down, weights.focal_gamma, weights.focal_alpha)
    parts = {"focal": focal, "lc": None}
    loss = focal
    if use_contrastive:
        pull, pull_ok = d_local(nu_n, mask_down if pull_mask is None else pull_mask, bank)
        push, push_ok = d_local(nu_p, mask_down, bank)
        if pull_ok and push_ok:
            lc = tritanh(pull, push, weights)
            parts["lc"] = lc
            loss = loss + lc
    return loss, parts


def global_loss(
    disc_n: torch.Tensor,
    disc_s: Optional[torch.Tensor],
    nu_n,
    nu_s,
    bank: AnchorBank,
    weights: LossWeights,
    use_contrastive: bool = True,
    use_synthetic_bce: bool = True,
) -> tuple[torch.Tensor, dict]:
    """Per-sample global objective: BCE(normal scores, 0) + BCE(synthetic
    scores, 1) + unmasked pull/push contrastive term."""
    bce_n = bce_loss(disc_n, 0.0)
    parts: dict = {"bce_n": bce_n, "bce_s": None, "gc": None}
    loss = bce_n
    if use_synthetic_bce and disc_s is not None:
        bce_s = bce_loss(disc_s, 1.0)
        parts["bce_s"] = bce_s
        loss = loss + bce_s
    if use_contrastive and nu_s is not None:
        gc = tritanh(d_global(nu_n, bank), d_global(nu_s, bank), weights)
        parts["gc"] = gc
        loss = loss + gc
    return loss, parts


def _mean(values: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack(list(values)).mean() if values else torch.zeros((), dtype=torch.float64)


def total_loss(
    local_parts: Sequence[dict], global_parts: Sequence[dict]
) -> tuple[torch.Tensor, LossReport]:
    """Aggregate per-sample parts into the training loss and its report.

    Focal and BCE terms average over all items; each contrastive term
    averages over the items where it was computed. The report satisfies
    total = l_local + l_global exactly.
    """
    focal = _mean([p["focal"] for p in local_parts])
    lc = _mean([p["lc"] for p in local_parts if p["lc"] is not None])
    bce_n = _mean([p["bce_n"] for p in global_parts])
    bce_s = _mean([p["bce_s"] for p in global_parts if p["bce_s"] is not None])
    gc = _mean([p["gc"] for p in global_parts if p["gc"] is not None])
    l_local = focal + lc
    l_global = bce_n + bce_s + gc
    total = l_local + l_global
    report = LossReport(
        total=total.item(),
        l_local=l_local.item(),
        l_global=l_global.item(),
        l_lc=lc.item(),
        l_gc=gc.item(),
        focal=focal.item(),
        bce_n=bce_n.item(),
        bce_s=bce_s.item(),
    )
    return total, report
