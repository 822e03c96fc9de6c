"""Prototypical anchor bank: greedy k-center coreset over embedding cells.

The bank is built once from raw extractor features of the un-augmented
few-shot images, before any training, and is immutable afterwards; it
serves as the fixed reference set for all pull/push distance terms.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import EmbeddingGrid, grid_values

_MAGIC = b"FPAB"
_VERSION = 1
_EXACT_POOL_LIMIT = 100_000


@dataclass(frozen=True)
class AnchorBank:
    """Coreset-selected anchor vectors with build provenance."""

    anchors: torch.Tensor  # (N, D) float64, exact upcast of the float32 storage
    space: str = "raw"
    seed: int = 0
    ratio: float = 1.0
    source_ids: tuple[str, ...] = ()
    indices: tuple[int, ...] = ()  # selected pool indices, in selection order

    def __post_init__(self):
        if self.anchors.ndim != 2 or self.anchors.shape[0] < 1:
            raise ValueError("bank needs at least one anchor vector of shape (N, D)")
        if not torch.isfinite(self.anchors).all():
            raise ValueError("bank contains non-finite anchors")
        if len(self.indices) != len(set(self.indices)):
            raise ValueError("duplicate anchor indices in bank metadata")

    @property
    def size(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]


def kcenter_select(
    pool: np.ndarray, k: int, start: int, projection_seed: int = 0
) -> list[int]:
    """Greedy k-center selection over `pool` rows, starting from `start`.

    Repeatedly adds the candidate with maximum distance to its nearest
    already-selected point (ties resolved to the lowest index). Selection
    is exact for pools up to 100k rows; larger pools are first reduced by
    a seeded Gaussian random projection, for selection only.
    """
    n = pool.shape[0]
    if n == 0:
        raise ValueError("empty candidate pool")
    k = min(k, n)
    feats = pool.astype(np.float64, copy=False)
    if n > _EXACT_POOL_LIMIT and pool.shape[1] > 128:
        proj_rng = np.random.default_rng(projection_seed)
        proj = proj_rng.standard_normal((pool.shape[1], 128)) / math.sqrt(128)
        feats = feats @ proj

    selected = [int(start)]
    diff = feats - feats[start]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    min_d2[start] = -1.0  # never reselect
    for _ in range(k - 1):
        idx = int(np.argmax(min_d2))
        selected.append(idx)
        diff = feats - feats[idx]
        d2 = np.einsum("ij,ij->i", diff, diff)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[idx] = -1.0
    return selected


def build_bank(
    grids: Sequence[EmbeddingGrid],
    ratio: float = 0.1,
    cap: int = 2048,
    seed: int = 0,
    source_ids: Optional[Sequence[str]] = None,
) -> AnchorBank:
    """Flatten all grid cells into one pool and coreset-select the anchors.

    k = min(ceil(ratio * pool size), cap); the greedy start index is drawn
    from a generator seeded with `seed`.
    """
    if not grids:
        raise ValueError("need at least one embedding grid")
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    dim = grids[0].dim
    space = grids[0].space
    for g in grids:
        if g.dim != dim:
            raise ValueError("all grids must share the channel dimension")
    pool = np.concatenate([grid_values(g).reshape(-1, dim).numpy() for g in grids], axis=0)
    if pool.shape[0] == 0:
        raise ValueError("empty candidate pool")
    k = min(int(math.ceil(ratio * pool.shape[0])), cap, pool.shape[0])
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, pool.shape[0]))
    idx = kcenter_select(pool, k, start=start, projection_seed=seed)
    anchors32 = pool[idx].astype(np.float32)
    return AnchorBank(
        anchors=torch.from_numpy(anchors32.astype(np.float64)),
        space=space,
        seed=seed,
        ratio=ratio,
        source_ids=tuple(source_ids or ()),
        indices=tuple(idx),
    )


def nearest_distance(bank: AnchorBank, grid) -> torch.Tensor:
    """Per-cell Euclidean distance to the nearest anchor, shape (L_H, L_W).

    Differentiable with respect to the grid: the min picks one anchor per
    cell and the gradient flows through the selected pair.
    """
    values = grid_values(grid)
    if values.shape[-1] != bank.dim:
        raise ValueError(f"grid dim {values.shape[-1]} != bank dim {bank.dim}")
    flat = values.reshape(-1, bank.dim)
    d = torch.cdist(flat, bank.anchors, compute_mode="donot_use_mm_for_euclid_dist")
    return d.min(dim=1).values.reshape(values.shape[0], values.shape[1])


def save_bank(bank: AnchorBank, path: Path | str) -> None:
    """Write the bank file: fixed header, JSON metadata, float32 LE array."""
    path = Path(path)
    meta = json.dumps({"source_ids": list(bank.source_ids), "indices": list(bank.indices)}).encode()
    payload = bank.anchors.to(torch.float32).numpy().astype("<f4").tobytes()
    space_code = 0 if bank.space == "raw" else 1
    header = _MAGIC + struct.pack(
        "<IIIqdBI", _VERSION, bank.dim, bank.size, bank.seed, bank.ratio, space_code, len(meta)
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + meta + payload)
    tmp.replace(path)


def load_bank(path: Path | str) -> AnchorBank:
    """Read a bank file; fails loudly on version mismatch or truncation."""
    raw = Path(path).read_bytes()
    head_len = len(_MAGIC) + struct.calcsize("<IIIqdBI")
    if len(raw) < head_len or raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an anchor bank file")
    version, dim, count, seed, ratio, space_code, meta_len = struct.unpack(
        "<IIIqdBI", raw[4:head_len]
    )
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported bank version {version} (expected {_VERSION})")
    expected = head_len + meta_len + count * dim * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: corrupt bank file ({len(raw)} bytes, expected {expected})")
    meta = json.loads(raw[head_len : head_len + meta_len].decode())
    arr = np.frombuffer(raw[head_len + meta_len :], dtype="<f4").reshape(count, dim)
    return AnchorBank(
        anchors=torch.from_numpy(arr.astype(np.float64)),
        space="raw" if space_code == 0 else "adapted",
        seed=seed,
        ratio=ratio,
        source_ids=tuple(meta["source_ids"]),
        indices=tuple(meta["indices"]),
    )
