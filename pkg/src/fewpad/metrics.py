"""Evaluation metrics (image/pixel AUROC, per-region overlap, DICE, IoU),
multi-seed report aggregation, and the embedding export for external
projection tools.

AUROC uses the rank statistic (ties count one half). The per-region
overlap curve is computed exactly at every unique score threshold via one
descending sort and cumulative region hit counts; its convention, part of
the contract: prediction = score >= t, the curve starts at (0, 0), and the
area up to the FPR limit is trapezoidal with linear interpolation at the
limit, normalised by the limit. DICE and IoU pool pixels over the whole
test set. Connected components use 8-connectivity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import label as cc_label
from scipy.stats import rankdata

from .bank import AnchorBank
from .config import RunConfig
from .pipeline import AnomalyMap, Checkpoint, infer

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative
    (ties count 0.5). Raises on single-class input."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pro_curve(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Exact (FPR, mean per-region TPR) curve over all unique thresholds."""
    region_of_pixel: list[np.ndarray] = []
    region_areas: list[int] = []
    n_regions = 0
    for mask in masks:
        lab, count = cc_label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
        remap = np.zeros(count + 1, dtype=np.int64)
        for r in range(1, count + 1):
            n_regions += 1
            remap[r] = n_regions
            region_areas.append(int((lab == r).sum()))
        region_of_pixel.append(remap[lab])
    if n_regions == 0:
        raise ValueError("per-region overlap needs at least one anomalous region")

    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    regions = np.concatenate([r.ravel() for r in region_of_pixel])
    if scores.shape != regions.shape:
        raise ValueError("maps and masks must have matching shapes")
    n_neg = int((regions == 0).sum())
    if n_neg == 0:
        raise ValueError("per-region overlap needs at least one normal pixel")
    areas = np.asarray(region_areas, dtype=np.float64)

    order = np.argsort(scores, kind="stable")[::-1]
    sorted_scores = scores[order]
    sorted_regions = regions[order]

    hit_fraction = np.zeros(n_regions + 1)  # index 0 unused
    mean_tpr_running = 0.0
    fp_running = 0
    fprs = [0.0]
    tprs = [0.0]
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            r = sorted_regions[j]
            if r == 0:
                fp_running += 1
            else:
                hit_fraction[r] += 1.0 / areas[r - 1]
                mean_tpr_running += 1.0 / (areas[r - 1] * n_regions)
            j += 1
        fprs.append(fp_running / n_neg)
        tprs.append(mean_tpr_running)
        i = j
    return np.asarray(fprs), np.asarray(tprs)


def _area_to_limit(fprs: np.ndarray, tprs: np.ndarray, limit: float) -> float:
    """Trapezoidal area under the curve on [0, limit], interpolating at the limit."""
    area = 0.0
    for k in range(1, len(fprs)):
        x0, x1 = fprs[k - 1], fprs[k]
        y0, y1 = tprs[k - 1], tprs[k]
        if x1 <= limit:
            area += (x1 - x0) * (y0 + y1) / 2.0
        else:
            if x0 < limit:
                y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
                area += (limit - x0) * (y0 + y_lim) / 2.0
            break
    return area


def pro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Area under the mean per-region overlap vs. FPR curve up to
    `fpr_limit`, normalised by the limit."""
    if not (0.0 < fpr_limit <= 1.0):
        raise ValueError(f"fpr limit must be in (0, 1], got {fpr_limit}")
    fprs, tprs = _pro_curve(maps, masks)
    return _area_to_limit(fprs, tprs, fpr_limit) / fpr_limit


def dice_iou(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    mode: str = "best",
    tau: float = 0.5,
    sweep_points: int = 200,
) -> tuple[float, float]:
    """Overlap metrics between the binarised prediction and the ground truth.

    "fixed" binarises at `tau`; "best" picks the threshold maximising DICE
    over a linear sweep between the score extremes. Both sets empty counts
    as perfect overlap (1, 1).
    """
    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    gt = np.concatenate([np.asarray(m).ravel() for m in masks]) > 0
    if scores.shape != gt.shape:
        raise ValueError("maps and masks must have matching shapes")

    def at(threshold: float) -> tuple[float, float]:
        pred = scores >= threshold
        inter = float(np.sum(pred & gt))
        p_sum, g_sum = float(pred.sum()), float(gt.sum())
        union = p_sum + g_sum - inter
        dice = 2.0 * inter / (p_sum + g_sum) if (p_sum + g_sum) > 0 else 1.0
        iou = inter / union if union > 0 else 1.0
        return dice, iou

    if mode == "fixed":
        return at(tau)
    if mode != "best":
        raise ValueError(f"unknown dice mode {mode!r}")
    lo, hi = float(scores.min()), float(scores.max())
    best = (-1.0, 0.0)
    for threshold in np.linspace(lo, hi, sweep_points):
        cand = at(threshold)
        if cand[0] > best[0]:
            best = cand
    return best


@dataclass(frozen=True)
class SeedMetrics:
    seed: int
    image_auroc: float
    pixel_auroc: float
    pro: float
    dice: float
    iou: float


@dataclass(frozen=True)
class EvalReport:
    per_seed: tuple[SeedMetrics, ...]
    mean: SeedMetrics
    std: SeedMetrics
    n_images: int
    n_pixels: int

    def to_text(self) -> str:
        header = f"{'seed':>6} {'img_auroc':>10} {'px_auroc':>10} {'pro':>10} {'dice':>10} {'iou':>10}"
        rows = [header, "-" * len(header)]
        for m in self.per_seed:
            rows.append(
                f"{m.seed:>6d} {m.image_auroc:>10.4f} {m.pixel_auroc:>10.4f} "
                f"{m.pro:>10.4f} {m.dice:>10.4f} {m.iou:>10.4f}"
            )
        rows.append("-" * len(header))
        rows.append(
            f"{'mean':>6} {self.mean.image_auroc:>10.4f} {self.mean.pixel_auroc:>10.4f} "
            f"{self.mean.pro:>10.4f} {self.mean.dice:>10.4f} {self.mean.iou:>10.4f}"
        )
        rows.append(
            f"{'std':>6} {self.std.image_auroc:>10.4f} {self.std.pixel_auroc:>10.4f} "
            f"{self.std.pro:>10.4f} {self.std.dice:>10.4f} {self.std.iou:>10.4f}"
        )
        rows.append(f"images={self.n_images} pixels={self.n_pixels}")
        return "\n".join(rows)

    def to_json_dict(self) -> dict:
        def row(m: SeedMetrics) -> dict:
            return {
                "seed": m.seed, "image_auroc": m.image_auroc, "pixel_auroc": m.pixel_auroc,
                "pro": m.pro, "dice": m.dice, "iou": m.iou,
            }

        return {
            "per_seed": [row(m) for m in self.per_seed],
            "mean": row(self.mean),
            "std": row(self.std),
            "n_images": self.n_images,
            "n_pixels": self.n_pixels,
        }


def compute_metrics(maps: Sequence[AnomalyMap], samples, config: RunConfig, seed: int = 0) -> SeedMetrics:
    """All metrics for one set of anomaly maps against their samples."""
    labels = np.asarray([int(s.label or 0) for s in samples])
    image_scores = np.asarray([m.image_score for m in maps])
    score_grids = [m.scores for m in maps]
    gt_masks = [
        s.mask if s.mask is not None else np.zeros(s.pixels.shape[:2], dtype=np.uint8) for s in samples
    ]
    pixel_scores = np.concatenate([g.ravel() for g in score_grids])
    pixel_labels = np.concatenate([m.ravel() for m in gt_masks])
    dice, iou = dice_iou(
        score_grids, gt_masks, mode=config.eval.dice_mode, tau=config.eval.dice_tau
    )
    return SeedMetrics(
        seed=seed,
        image_auroc=auroc(image_scores, labels),
        pixel_auroc=auroc(pixel_scores, pixel_labels),
        pro=pro(score_grids, gt_masks, fpr_limit=config.eval.pro_fpr_limit),
        dice=dice,
        iou=iou,
    )


def evaluate(
    checkpoints: Checkpoint | Sequence[Checkpoint],
    bank: AnchorBank,
    samples,
    config: Optional[RunConfig] = None,
) -> EvalReport:
    """Run inference over the test set for each checkpoint (one per seed)
    and aggregate the metrics as mean and standard deviation."""
    if isinstance(checkpoints, Checkpoint):
        checkpoints = [checkpoints]
    if not checkpoints or not samples:
        raise ValueError("need at least one checkpoint and one sample")
    config = config or checkpoints[0].config
    rows = []
    for ckpt in checkpoints:
        maps = [infer(s, ckpt, bank) for s in samples]
        rows.append(compute_metrics(maps, samples, config, seed=ckpt.config.seed))

    def agg(fn) -> SeedMetrics:
        return SeedMetrics(
            seed=-1,
            image_auroc=float(fn([r.image_auroc for r in rows])),
            pixel_auroc=float(fn([r.pixel_auroc for r in rows])),
            pro=float(fn([r.pro for r in rows])),
            dice=float(fn([r.dice for r in rows])),
            iou=float(fn([r.iou for r in rows])),
        )

    n_pixels = int(sum(s.pixels.shape[0] * s.pixels.shape[1] for s in samples))
    return EvalReport(
        per_seed=tuple(rows),
        mean=agg(np.mean),
        std=agg(np.std),
        n_images=len(list(samples)),
        n_pixels=n_pixels,
    )


# ---------------------------------------------------------------------------
# embedding export

EXPORT_KINDS = ("normal", "local_synthetic", "gpe", "real_anomalous", "anchor")


def export_embeddings(
    checkpoint: Checkpoint,
    bank: AnchorBank,
    samples,
    path: Path | str,
    include_synthetic: bool = True,
) -> int:
    """Write adapted cell embeddings, their kind labels, and the anchor
    vectors as tab-separated columns (kind, sample id, row, col, d0..dD).

    Cells of masked test images are labelled real_anomalous where the
    grid-downsampled mask is positive. With `include_synthetic`, one
    locally corrupted variant and one perturbed (synthetic) embedding are
    exported per sample. Returns the number of rows written.
    """
    from .losses import downsample_mask
    from .pieg import generate_gpe
    from .pipeline import derive_rng, derive_torch_generator, texture_source
    from .data import preprocess_to_square
    from .synthesis import corrupt

    config = checkpoint.config
    extractor = checkpoint.extractor()
    textures = texture_source(config)
    path = Path(path)
    rows = 0
    with path.open("w") as fh:
        dim = checkpoint.adapter.spec.resolved_out_dim()
        fh.write("kind\tsample_id\trow\tcol\t" + "\t".join(f"d{i}" for i in range(dim)) + "\n")

        def emit(kind: str, sample_id: str, r: int, c: int, vec: np.ndarray):
            nonlocal rows
            fh.write(f"{kind}\t{sample_id}\t{r}\t{c}\t" + "\t".join(repr(float(v)) for v in vec) + "\n")
            rows += 1

        with torch.no_grad():
            for idx, sample in enumerate(samples):
                square, _ = preprocess_to_square(sample.pixels, config.working_resolution)
                nu = checkpoint.adapter.adapt(extractor.extract(square))
                mask_down = None
                if sample.mask is not None and sample.mask.any():
                    sq_mask, _ = preprocess_to_square(
                        sample.mask[:, :, None].astype(np.float64), config.working_resolution
                    )
                    mask_down = downsample_mask(sq_mask[:, :, 0] > 0.5, (nu.height, nu.width))
                vals = nu.values.numpy()
                for r in range(nu.height):
                    for c in range(nu.width):
                        kind = "normal"
                        if mask_down is not None and mask_down[r, c] > 0:
                            kind = "real_anomalous"
                        emit(kind, sample.id, r, c, vals[r, c])

                if include_synthetic and (sample.label or 0) == 0:
                    rng = derive_rng(config.seed, 9000, idx)
                    corr = corrupt(square, textures, config.anomaly, rng)
                    if not corr.empty:
                        nu_p = checkpoint.adapter.adapt(extractor.extract(corr.image))
                        m_down = downsample_mask(corr.mask, (nu_p.height, nu_p.width))
                        vals_p = nu_p.values.numpy()
                        for r in range(nu_p.height):
                            for c in range(nu_p.width):
                                if m_down[r, c] > 0:
                                    emit("local_synthetic", sample.id, r, c, vals_p[r, c])
                    gen = derive_torch_generator(config.seed, 9001, idx)
                    gpe = generate_gpe(
                        nu.values, checkpoint.discriminator, bank, config.loss, config.pieg, gen,
                        use_contrastive=config.use_lgc,
                    )
                    vals_s = gpe.embedding.numpy()
                    for r in range(nu.height):
                        for c in range(nu.width):
                            emit("gpe", sample.id, r, c, vals_s[r, c])

        anchors = bank.anchors.numpy()
        for i in range(anchors.shape[0]):
            emit("anchor", f"anchor/{i:05d}", -1, -1, anchors[i])
    return rows


def read_embedding_export(path: Path | str) -> dict:
    """Parse an embedding export back into arrays (exact float round-trip)."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    dim = len(header) - 4
    kinds, ids, rows_, cols, vecs = [], [], [], [], []
    for line in lines[1:]:
        parts = line.split("\t")
        kind = parts[0]
        if kind not in EXPORT_KINDS:
            raise ValueError(f"unknown export kind {kind!r}")
        kinds.append(kind)
        ids.append(parts[1])
        rows_.append(int(parts[2]))
        cols.append(int(parts[3]))
        vecs.append([float(x) for x in parts[4 : 4 + dim]])
    return {
        "kind": np.asarray(kinds),
        "sample_id": np.asarray(ids),
        "row": np.asarray(rows_, dtype=int),
        "col": np.asarray(cols, dtype=int),
        "values": np.asarray(vecs, dtype=np.float64),
    }
