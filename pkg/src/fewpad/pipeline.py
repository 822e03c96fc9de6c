"""Training and inference orchestration.

One training step draws fresh augmentations of all K few-shot images,
corrupts them locally, adapts the extracted features, synthesises one
global pathological embedding per item, and takes a single optimizer step
on the adapter and discriminator jointly. The anchor bank and the backbone
are never modified.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

from .backbone import FeatureExtractor
from .bank import AnchorBank, build_bank, load_bank
from .config import RunConfig, dump_config, parse_config
from .data import ImageSample, TextureSource, preprocess_to_square, restore_from_square
from .losses import LossReport, downsample_mask, global_loss, local_loss, total_loss
from .network import AdapterSpec, Discriminator, DiscriminatorSpec, FeatureAdapter, trainable_parameters
from .pieg import generate_gpe
from .synthesis import augment, corrupt

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent numpy stream for a (step, item, ...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def derive_torch_generator(seed: int, *key: int) -> torch.Generator:
    state = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)).generate_state(2, np.uint64)
    g = torch.Generator()
    g.manual_seed(int(state[0] ^ (state[1] >> 1)))
    return g


@dataclass(frozen=True)
class AnomalyMap:
    """Per-pixel anomaly scores at input resolution plus the image score."""

    scores: np.ndarray  # (H, W) float64 in [0, 1]
    image_score: float  # max over pixels
    decision: Optional[bool] = None

    def __post_init__(self):
        if not np.isfinite(self.scores).all():
            raise ValueError("anomaly map contains non-finite scores")
        if abs(self.image_score - float(self.scores.max())) > 1e-12:
            raise ValueError("image score must equal the pixel maximum")


@dataclass
class Checkpoint:
    """Adapter + discriminator weights plus the run context they came from."""

    adapter: FeatureAdapter
    discriminator: Discriminator
    config: RunConfig
    bank_path: Optional[str] = None
    tau: Optional[float] = None
    _extractor: Optional[FeatureExtractor] = field(default=None, repr=False, compare=False)

    def extractor(self) -> FeatureExtractor:
        if self._extractor is None:
            self._extractor = build_extractor(self.config)
        return self._extractor

    def save(self, path: Path | str) -> None:
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "adapter_spec": self.adapter.spec.__dict__,
            "disc_spec": self.discriminator.spec.__dict__,
            "adapter_state": self.adapter.state_dict(),
            "disc_state": self.discriminator.state_dict(),
            "config_text": dump_config(self.config),
            "bank_path": self.bank_path,
            "tau": self.tau,
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        version = payload.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        adapter = FeatureAdapter(AdapterSpec(**payload["adapter_spec"]))
        adapter.load_state_dict(payload["adapter_state"])
        disc = Discriminator(DiscriminatorSpec(**payload["disc_spec"]))
        disc.load_state_dict(payload["disc_state"])
        return cls(
            adapter=adapter,
            discriminator=disc,
            config=parse_config(payload["config_text"]),
            bank_path=payload.get("bank_path"),
            tau=payload.get("tau"),
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    bank: AnchorBank
    history: list[LossReport]
    log_path: Optional[Path] = None
    best_checkpoint: Optional[Checkpoint] = None


def build_extractor(config: RunConfig) -> FeatureExtractor:
    bb = config.backbone
    return FeatureExtractor(
        arch=bb.arch,
        layers=bb.layers,
        weights=bb.weights,
        seed=bb.seed,
        neighborhood=bb.neighborhood,
    )


def texture_source(config: RunConfig) -> TextureSource:
    if config.texture_kind == "folder":
        return TextureSource(kind="folder", folder=Path(config.texture_folder), seed=config.seed)
    return TextureSource(kind="procedural", seed=config.seed)


def build_bank_from_samples(
    samples: Sequence[ImageSample], config: RunConfig, extractor: Optional[FeatureExtractor] = None
) -> AnchorBank:
    """Extract raw features of the un-augmented samples and coreset them."""
    if not samples:
        raise ValueError("need at least one sample to build the bank")
    extractor = extractor or build_extractor(config)
    pre = [preprocess_to_square(s.pixels, config.working_resolution)[0] for s in samples]
    grids = extractor.extract_batch(pre)
    return build_bank(
        grids,
        ratio=config.bank.ratio,
        cap=config.bank.cap,
        seed=config.seed,
        source_ids=[s.id for s in samples],
    )


def _image_auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    from .metrics import auroc

    return auroc(np.asarray(scores, dtype=np.float64), np.asarray(labels))


def train(
    train_samples: Sequence[ImageSample],
    config: RunConfig,
    *,
    bank: Optional[AnchorBank] = None,
    out_dir: Optional[Path | str] = None,
    val_samples: Optional[Sequence[ImageSample]] = None,
) -> TrainResult:
    """Train the adapter and discriminator on K few-shot clean images.

    Writes a line-oriented loss log (one line per step) and the final
    checkpoint under `out_dir` when given; tracks the best-on-validation
    checkpoint when a validation split with both classes is supplied.
    """
    if len(train_samples) < 1:
        raise ValueError("need at least one training sample")
    extractor = build_extractor(config)
    res = config.working_resolution
    prepared = [preprocess_to_square(s.pixels, res)[0] for s in train_samples]
    if bank is None:
        grids = extractor.extract_batch(prepared)
        bank = build_bank(
            grids,
            ratio=config.bank.ratio,
            cap=config.bank.cap,
            seed=config.seed,
            source_ids=[s.id for s in train_samples],
        )
    if bank.dim != extractor.out_dim:
        raise ValueError(f"bank dim {bank.dim} does not match extractor dim {extractor.out_dim}")

    adapter_gen = derive_torch_generator(config.seed, 1)
    disc_gen = derive_torch_generator(config.seed, 2)
    out_dim = config.network.adapter_out_dim or None
    adapter = FeatureAdapter(
        AdapterSpec(in_dim=extractor.out_dim, out_dim=out_dim, init_noise=config.network.adapter_init_noise),
        adapter_gen,
    )
    disc = Discriminator(
        DiscriminatorSpec(
            in_dim=adapter.spec.resolved_out_dim(),
            hidden=config.network.disc_hidden,
            depth=config.network.disc_depth,
            negative_slope=config.network.disc_negative_slope,
        ),
        disc_gen,
    )
    logger.info(
        "training %d parameters (adapter %d, discriminator %d); backbone frozen",
        trainable_parameters(adapter, disc),
        trainable_parameters(adapter),
        trainable_parameters(disc),
    )
    optimizer = torch.optim.Adam(
        [
            {"params": adapter.parameters(), "lr": config.adapter_lr},
            {"params": disc.parameters(), "lr": config.disc_lr},
        ]
    )
    textures = texture_source(config)
    use_global_path = config.use_lgc or config.use_gpe_bce

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.txt"
        log_file = log_path.open("w")

    history: list[LossReport] = []
    best_auroc, best_state = -1.0, None
    val_every = max(1, config.epochs // 10)
    try:
        for step in range(1, config.epochs + 1):
            local_parts, global_parts = [], []
            for i, base in enumerate(prepared):
                rng = derive_rng(config.seed, step, i)
                x_n = augment(base, config.augment, rng)
                corr = corrupt(x_n, textures, config.anomaly, rng)
                raw_n, raw_p = extractor.extract_batch([x_n, corr.image])
                nu_n = adapter.adapt(raw_n)
                nu_p = adapter.adapt(raw_p)
                mask_down = downsample_mask(corr.mask, (nu_n.height, nu_n.width))
                pull_mask = (
                    torch.ones_like(mask_down) if config.mask_mode == "allones_normal" else None
                )
                _, lparts = local_loss(
                    disc.discriminate(nu_p),
                    mask_down,
                    nu_n.values,
                    nu_p.values,
                    bank,
                    config.loss,
                    use_contrastive=config.use_llc,
                    pull_mask=pull_mask,
                )
                local_parts.append(lparts)

                disc_n = disc(nu_n.values)
                if use_global_path:
                    gen = derive_torch_generator(config.seed, step, i, 3)
                    gpe = generate_gpe(
                        nu_n.values.detach(),
                        disc,
                        bank,
                        config.loss,
                        config.pieg,
                        gen,
                        use_contrastive=config.use_lgc,
                    )
                    _, gparts = global_loss(
                        disc_n,
                        disc(gpe.embedding),
                        nu_n.values,
                        gpe.embedding,
                        bank,
                        config.loss,
                        use_contrastive=config.use_lgc,
                        use_synthetic_bce=config.use_gpe_bce,
                    )
                else:
                    _, gparts = global_loss(
                        disc_n, None, nu_n.values, None, bank, config.loss,
                        use_contrastive=False, use_synthetic_bce=False,
                    )
                global_parts.append(gparts)

            loss, report = total_loss(local_parts, global_parts)
            if not report.finite():
                raise RuntimeError(f"non-finite loss at step {step}: {report}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append(report)
            if log_file is not None:
                log_file.write(report.as_line(step) + "\n")

            if val_samples and step % val_every == 0:
                ckpt = Checkpoint(adapter=adapter, discriminator=disc, config=config, _extractor=extractor)
                maps = [infer(s, ckpt, bank) for s in val_samples]
                labels = [int(s.label or 0) for s in val_samples]
                if len(set(labels)) == 2:
                    score = _image_auroc([m.image_score for m in maps], labels)
                    if score > best_auroc:
                        best_auroc = score
                        best_state = (
                            {k: v.clone() for k, v in adapter.state_dict().items()},
                            {k: v.clone() for k, v in disc.state_dict().items()},
                        )
    finally:
        if log_file is not None:
            log_file.close()

    tau = None
    checkpoint = Checkpoint(
        adapter=adapter, discriminator=disc, config=config, tau=tau, _extractor=extractor
    )
    if config.tau_policy == "fixed":
        checkpoint.tau = config.tau_value
    elif config.tau_policy == "fmax" and val_samples:
        maps = [infer(s, checkpoint, bank) for s in val_samples]
        labels = [int(s.label or 0) for s in val_samples]
        if len(set(labels)) == 2:
            checkpoint.tau = select_threshold([m.image_score for m in maps], labels, "fmax")
        else:
            logger.warning("validation split has a single class; skipping threshold selection")

    best_checkpoint = None
    if best_state is not None:
        best_adapter = FeatureAdapter(adapter.spec)
        best_adapter.load_state_dict(best_state[0])
        best_disc = Discriminator(disc.spec)
        best_disc.load_state_dict(best_state[1])
        best_checkpoint = Checkpoint(
            adapter=best_adapter, discriminator=best_disc, config=config,
            tau=checkpoint.tau, _extractor=extractor,
        )

    if out_dir is not None:
        checkpoint.save(out_dir / "checkpoint.pt")
        if best_checkpoint is not None:
            best_checkpoint.save(out_dir / "checkpoint_best.pt")
    return TrainResult(
        checkpoint=checkpoint, bank=bank, history=history, log_path=log_path,
        best_checkpoint=best_checkpoint,
    )


def infer(image: ImageSample | np.ndarray, checkpoint: Checkpoint, bank: AnchorBank) -> AnomalyMap:
    """Score one image: extract, adapt, discriminate, interpolate to input
    size, optionally smooth, then take the pixel maximum as the image score."""
    pixels = image.pixels if isinstance(image, ImageSample) else image
    config = checkpoint.config
    square, box = preprocess_to_square(pixels, config.working_resolution)
    extractor = checkpoint.extractor()
    with torch.no_grad():
        grid = extractor.extract(square)
        if grid.dim != checkpoint.adapter.spec.in_dim:
            raise ValueError(
                f"extractor dim {grid.dim} does not match checkpoint adapter dim "
                f"{checkpoint.adapter.spec.in_dim}"
            )
        nu = checkpoint.adapter.adapt(grid)
        scores = checkpoint.discriminator.discriminate(nu)
        up = F.interpolate(
            scores[None, None],
            size=(config.working_resolution, config.working_resolution),
            mode="bilinear",
            align_corners=False,
        )[0, 0].numpy()
    full = restore_from_square(up, box)
    if config.smooth_sigma > 0:
        full = gaussian_filter(full, sigma=config.smooth_sigma, mode="nearest")
    full = np.clip(full, 0.0, 1.0)
    image_score = float(full.max())
    decision = None if checkpoint.tau is None else bool(image_score > checkpoint.tau)
    return AnomalyMap(scores=full, image_score=image_score, decision=decision)


def select_threshold(scores: Sequence[float], labels: Sequence[int], policy: str, fixed_value: float = 0.5) -> Optional[float]:
    """Image-level decision threshold.

    "fixed" echoes `fixed_value`; "none" returns None; "fmax" returns the
    smallest candidate threshold (unique scores and midpoints of adjacent
    unique scores) maximising F1 of the decision `score >= tau`.
    """
    if policy == "none":
        return None
    if policy == "fixed":
        return float(fixed_value)
    if policy != "fmax":
        raise ValueError(f"unknown threshold policy {policy!r}")
    s = np.asarray([m.image_score if isinstance(m, AnomalyMap) else float(m) for m in scores])
    y = np.asarray(labels, dtype=int)
    if len(s) != len(y) or len(s) == 0:
        raise ValueError("scores and labels must be equal-length and nonempty")
    uniq = np.unique(s)
    candidates = np.unique(np.concatenate([uniq, (uniq[:-1] + uniq[1:]) / 2.0]))
    best_tau, best_f1 = float(candidates[0]), -1.0
    for tau in candidates:
        pred = s >= tau
        tp = int(np.sum(pred & (y == 1)))
        fp = int(np.sum(pred & (y == 0)))
        fn = int(np.sum(~pred & (y == 1)))
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
        if f1 > best_f1 + 1e-12:
            best_f1, best_tau = f1, float(tau)
    return best_tau


def _conv_linear_flops(module: nn.Module, batch: torch.Tensor) -> float:
    """Static multiply-add count (x2) over conv/linear layers of one forward."""
    total = 0.0
    hooks = []

    def conv_hook(mod: nn.Conv2d, _inp, out):
        nonlocal total
        kh, kw = mod.kernel_size
        cin = mod.in_channels // mod.groups
        total += 2.0 * kh * kw * cin * mod.out_channels * out.shape[-2] * out.shape[-1]

    def lin_hook(mod: nn.Linear, _inp, out):
        nonlocal total
        total += 2.0 * mod.in_features * mod.out_features * (out.numel() // out.shape[-1])

    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(lin_hook))
    try:
        with torch.no_grad():
            module(batch)
    finally:
        for h in hooks:
            h.remove()
    return total


def estimate_flops(checkpoint: Checkpoint, image_size: int) -> float:
    """Static FLOP estimate of the inference path at a square input size."""
    extractor = checkpoint.extractor()
    trunk_flops = _conv_linear_flops(extractor.trunk, torch.zeros(1, 3, image_size, image_size))
    with torch.no_grad():
        feats = extractor.trunk(torch.zeros(1, 3, image_size, image_size))
    lh, lw = feats[0].shape[-2:]
    cells = lh * lw
    a = checkpoint.adapter.spec
    d = checkpoint.discriminator.spec
    head_flops = 2.0 * a.in_dim * a.resolved_out_dim() * cells
    dims = [d.in_dim] + [d.hidden] * d.depth + [1]
    head_flops += sum(2.0 * i * o * cells for i, o in zip(dims[:-1], dims[1:]))
    return trunk_flops + head_flops


def benchmark(
    checkpoint: Checkpoint, bank: AnchorBank, image_size: int = 256, repetitions: int = 10
) -> dict:
    """Measured inference throughput plus the static FLOP estimate.

    Inference runs with the working resolution pinned to `image_size`, so
    both numbers describe the same compute path.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    sized = Checkpoint(
        adapter=checkpoint.adapter,
        discriminator=checkpoint.discriminator,
        config=replace(checkpoint.config, working_resolution=image_size),
        tau=checkpoint.tau,
        _extractor=checkpoint.extractor(),
    )
    rng = np.random.default_rng(0)
    image = rng.uniform(0.0, 1.0, size=(image_size, image_size, 3))
    for _ in range(min(2, repetitions)):
        infer(image, sized, bank)
    start = time.perf_counter()
    for _ in range(repetitions):
        infer(image, sized, bank)
    elapsed = time.perf_counter() - start
    return {"fps": repetitions / elapsed, "flop_estimate": estimate_flops(checkpoint, image_size)}
