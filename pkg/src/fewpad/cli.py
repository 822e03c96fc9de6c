"""Command-line workflow: toy data generation, bank building, training,
inference, evaluation, and the throughput benchmark."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bank import load_bank, save_bank
from .config import RunConfig, load_config
from .data import ImageSample, ToySpec, load_dataset, load_image, make_toy_dataset, save_image, write_dataset
from .metrics import evaluate, export_embeddings
from .pipeline import Checkpoint, benchmark as run_benchmark, build_bank_from_samples, infer, train

logger = logging.getLogger(__name__)

_PACKAGED_CONFIGS = {"mri-like", "xray-like", "toy"}


def _resolve_config(config: str | None, seed: int | None) -> RunConfig:
    if config is None:
        cfg = RunConfig()
    elif config in _PACKAGED_CONFIGS:
        cfg = load_config(Path(__file__).parent / "configs" / f"{config.replace('-', '_')}.ini")
    else:
        cfg = load_config(config)
    if seed is not None:  # flags win over the config file
        cfg = replace(cfg, seed=seed)
    return cfg


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool):
    """Few-shot unsupervised pathology detection."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("make-toy")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output dataset root.")
@click.option("--k-shots", type=int, default=2, show_default=True, help="Number of clean training images.")
@click.option("--size", type=int, default=64, show_default=True, help="Square image size in pixels.")
@click.option("--n-normal", type=int, default=10, show_default=True, help="Normal test images.")
@click.option("--n-anomalous", type=int, default=10, show_default=True, help="Anomalous test images.")
@click.option("--seed", type=int, default=0, show_default=True)
def make_toy(out: Path, k_shots: int, size: int, n_normal: int, n_anomalous: int, seed: int):
    """Write a deterministic synthetic toy dataset in the documented layout."""
    spec = ToySpec(image_size=size, k_train=k_shots, n_normal_test=n_normal, n_anomalous_test=n_anomalous)
    train_samples, test_samples = make_toy_dataset(spec, seed)
    write_dataset(train_samples, test_samples, out)
    click.echo(f"wrote {len(train_samples)} train and {len(test_samples)} test images under {out}")


@main.command("build-bank")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True, help="Dataset root.")
@click.option("--config", type=str, default=None, help="Config file path or preset name.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Bank file to write.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def build_bank_cmd(data: Path, config: str | None, out: Path, seed: int | None):
    """Extract features from the train split and coreset-select the anchor bank."""
    cfg = _resolve_config(config, seed)
    samples = load_dataset(data, "train")
    if not samples:
        raise click.ClickException(f"no training images under {data}")
    bank = build_bank_from_samples(samples, cfg)
    save_bank(bank, out)
    pool = sum(1 for _ in samples)
    click.echo(f"bank: {bank.size} anchors of dim {bank.dim} (from {pool} images) -> {out}")


@main.command("train")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True, help="Dataset root.")
@click.option("--bank", "bank_path", type=click.Path(path_type=Path), default=None, help="Existing bank file (built if omitted).")
@click.option("--config", type=str, default=None, help="Config file path or preset name.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output directory.")
@click.option("--ablation", type=click.Choice(["none", "llc", "lgc", "glcl"]), default="glcl", show_default=True, help="Contrastive-loss ablation row.")
@click.option("--epochs", type=int, default=None, help="Override the config epoch count.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def train_cmd(data: Path, bank_path: Path | None, config: str | None, out: Path, ablation: str, epochs: int | None, seed: int | None):
    """Train the adapter and discriminator; writes checkpoint + loss log."""
    cfg = _resolve_config(config, seed).with_ablation(ablation)
    if epochs is not None:
        cfg = replace(cfg, epochs=epochs)
    samples = load_dataset(data, "train")
    if not samples:
        raise click.ClickException(f"no training images under {data}")
    bank = load_bank(bank_path) if bank_path else None
    result = train(samples, cfg, bank=bank, out_dir=out)
    if bank_path is None:
        save_bank(result.bank, out / "bank.fpab")
        result.checkpoint.bank_path = str(out / "bank.fpab")
        result.checkpoint.save(out / "checkpoint.pt")
    click.echo(f"trained {cfg.epochs} steps; final loss {result.history[-1].total:.6f}; checkpoint in {out}")


def _load_for_infer(checkpoint: Path, bank_path: Path | None):
    ckpt = Checkpoint.load(checkpoint)
    if bank_path is None:
        if not ckpt.bank_path or not Path(ckpt.bank_path).exists():
            raise click.ClickException("no --bank given and the checkpoint records no usable bank path")
        bank_path = Path(ckpt.bank_path)
    return ckpt, load_bank(bank_path)


@main.command("infer")
@click.option("--image", "image_path", type=click.Path(exists=True, path_type=Path), default=None, help="Single image file.")
@click.option("--dir", "dir_path", type=click.Path(exists=True, path_type=Path), default=None, help="Directory of image files.")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--bank", "bank_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output directory.")
@click.option("--tau", type=float, default=None, help="Image-level decision threshold.")
def infer_cmd(image_path: Path | None, dir_path: Path | None, checkpoint: Path, bank_path: Path | None, out: Path, tau: float | None):
    """Score images; writes 16-bit heatmap PNGs and a JSON score manifest."""
    if (image_path is None) == (dir_path is None):
        raise click.ClickException("give exactly one of --image or --dir")
    ckpt, bank = _load_for_infer(checkpoint, bank_path)
    if tau is not None:
        ckpt.tau = tau
    paths = [image_path] if image_path else sorted(
        p for p in dir_path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
    )
    if not paths:
        raise click.ClickException("no images to score")
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for p in paths:
        amap = infer(load_image(p), ckpt, bank)
        arr = (np.clip(amap.scores, 0.0, 1.0) * 65535.0).round().astype(np.uint16)
        from PIL import Image

        Image.fromarray(arr, mode="I;16").save(out / f"{p.stem}_heatmap.png")
        entry = {"image": str(p), "score": amap.image_score}
        if amap.decision is not None:
            entry["decision"] = bool(amap.decision)
        manifest.append(entry)
    (out / "scores.json").write_text(json.dumps(manifest, indent=2))
    click.echo(f"scored {len(paths)} image(s) -> {out}")


@main.command("evaluate")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True, help="Dataset root.")
@click.option("--checkpoint", "checkpoints", type=click.Path(exists=True, path_type=Path), multiple=True, required=True, help="One per seed; repeatable.")
@click.option("--bank", "bank_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--report", type=click.Path(path_type=Path), default=None, help="Also write the report as JSON.")
@click.option("--export-embeddings", "export_path", type=click.Path(path_type=Path), default=None, help="Dump adapted embeddings + anchors as TSV.")
def evaluate_cmd(data: Path, checkpoints: tuple[Path, ...], bank_path: Path | None, report: Path | None, export_path: Path | None):
    """Multi-seed metric report on the test split."""
    ckpts = []
    bank = None
    for c in checkpoints:
        ckpt, this_bank = _load_for_infer(c, bank_path)
        ckpts.append(ckpt)
        bank = bank or this_bank
    samples = load_dataset(data, "test")
    if not samples:
        raise click.ClickException(f"no test images under {data}")
    result = evaluate(ckpts, bank, samples)
    click.echo(result.to_text())
    if report is not None:
        report.write_text(json.dumps(result.to_json_dict(), indent=2))
    if export_path is not None:
        rows = export_embeddings(ckpts[0], bank, samples, export_path)
        click.echo(f"exported {rows} embedding rows -> {export_path}")


@main.command("benchmark")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--bank", "bank_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--size", type=int, default=256, show_default=True, help="Square input size.")
@click.option("--reps", type=int, default=10, show_default=True, help="Timed repetitions.")
def benchmark_cmd(checkpoint: Path, bank_path: Path | None, size: int, reps: int):
    """Measure inference FPS and report the static FLOP estimate."""
    ckpt, bank = _load_for_infer(checkpoint, bank_path)
    result = run_benchmark(ckpt, bank, image_size=size, repetitions=reps)
    click.echo(f"fps={result['fps']:.2f} flop_estimate={result['flop_estimate']:.4g} "
               f"({result['flop_estimate'] / 1e9:.3f} GFLOPs)")


if __name__ == "__main__":
    main()
