"""Run configuration: one dataclass tree covering every hyperparameter,
serialised to/from a flat sectioned key=value text file (INI).

Section/key schema (all keys optional; unknown keys are rejected)::

    [run]      seed epochs working_resolution adapter_lr disc_lr
               tau_policy tau_value smooth_sigma mask_mode
               use_llc use_lgc use_gpe_bce
    [backbone] arch layers weights neighborhood seed
    [bank]     ratio cap rebuild_every
    [network]  adapter_out_dim adapter_init_noise disc_hidden disc_depth
               disc_negative_slope
    [loss]     lambda_pull lambda_push eps focal_gamma focal_alpha
    [pieg]     steps eta noise_mean noise_scale retain_noise
    [augment]  rotation_deg translate_frac scale_lo scale_hi shear_deg
               elastic_alpha elastic_sigma p_affine p_elastic
    [anomaly]  beta_lo beta_hi area_min area_max texture texture_folder
    [eval]     pro_fpr_limit dice_mode dice_tau
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .losses import LossWeights
from .pieg import PiegConfig
from .synthesis import AugmentSpec, LocalAnomalySpec


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = "resnet18"
    layers: tuple[int, ...] = (2, 3)
    weights: str = "auto"  # "auto" | "random" | path
    neighborhood: int = 3
    seed: int = 0


@dataclass(frozen=True)
class BankConfig:
    ratio: float = 0.1
    cap: int = 2048
    rebuild_every: int = 0  # 0 = frozen raw-space bank (default mode)


@dataclass(frozen=True)
class NetworkConfig:
    adapter_out_dim: int = 0  # 0 = same as extractor dim
    adapter_init_noise: float = 1e-3
    disc_hidden: int = 1024
    disc_depth: int = 2
    disc_negative_slope: float = 0.2


@dataclass(frozen=True)
class EvalConfig:
    pro_fpr_limit: float = 0.3
    dice_mode: str = "best"  # "best" | "fixed"
    dice_tau: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 300
    working_resolution: int = 256
    adapter_lr: float = 1e-4
    disc_lr: float = 2e-4
    tau_policy: str = "none"  # "none" | "fixed" | "fmax"
    tau_value: float = 0.5
    smooth_sigma: float = 4.0  # 0 disables heatmap smoothing
    mask_mode: str = "shared"  # "shared" | "allones_normal"
    use_llc: bool = True
    use_lgc: bool = True
    use_gpe_bce: bool = True
    texture_kind: str = "procedural"  # "procedural" | "folder"
    texture_folder: str = ""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pieg: PiegConfig = field(default_factory=PiegConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    anomaly: LocalAnomalySpec = field(default_factory=LocalAnomalySpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.tau_policy not in ("none", "fixed", "fmax"):
            raise ValueError(f"unknown tau policy {self.tau_policy!r}")
        if self.mask_mode not in ("shared", "allones_normal"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.epochs < 1 or self.working_resolution < 16:
            raise ValueError("epochs must be >= 1 and working_resolution >= 16")

    def with_ablation(self, name: str) -> "RunConfig":
        """Apply one of the named contrastive-loss ablations."""
        switches = {
            "none": (False, False),
            "llc": (True, False),
            "lgc": (False, True),
            "glcl": (True, True),
        }
        if name not in switches:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(switches)}")
        use_llc, use_lgc = switches[name]
        return replace(self, use_llc=use_llc, use_lgc=use_lgc)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def load_config(path: Path | str) -> RunConfig:
    """Parse a config file into a RunConfig; unknown sections/keys are errors."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    parser.read_string(text)
    return _from_parser(parser)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    return _from_parser(parser)


def _section(parser: configparser.ConfigParser, name: str, allowed: set[str]) -> dict[str, str]:
    if not parser.has_section(name):
        return {}
    items = dict(parser.items(name))
    unknown = set(items) - allowed
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return items


def _from_parser(parser: configparser.ConfigParser) -> RunConfig:
    known_sections = {"run", "backbone", "bank", "network", "loss", "pieg", "augment", "anomaly", "eval"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    run = _section(
        parser,
        "run",
        {
            "seed", "epochs", "working_resolution", "adapter_lr", "disc_lr",
            "tau_policy", "tau_value", "smooth_sigma", "mask_mode",
            "use_llc", "use_lgc", "use_gpe_bce",
        },
    )
    bb = _section(parser, "backbone", {"arch", "layers", "weights", "neighborhood", "seed"})
    bank = _section(parser, "bank", {"ratio", "cap", "rebuild_every"})
    net = _section(
        parser,
        "network",
        {"adapter_out_dim", "adapter_init_noise", "disc_hidden", "disc_depth", "disc_negative_slope"},
    )
    loss = _section(parser, "loss", {"lambda_pull", "lambda_push", "eps", "focal_gamma", "focal_alpha"})
    pieg = _section(parser, "pieg", {"steps", "eta", "noise_mean", "noise_scale", "retain_noise"})
    aug = _section(
        parser,
        "augment",
        {
            "rotation_deg", "translate_frac", "scale_lo", "scale_hi", "shear_deg",
            "elastic_alpha", "elastic_sigma", "p_affine", "p_elastic",
        },
    )
    anom = _section(parser, "anomaly", {"beta_lo", "beta_hi", "area_min", "area_max", "texture", "texture_folder"})
    ev = _section(parser, "eval", {"pro_fpr_limit", "dice_mode", "dice_tau"})

    defaults = RunConfig()

    def get(d, key, cast, fallback):
        return cast(d[key]) if key in d else fallback

    backbone = BackboneConfig(
        arch=get(bb, "arch", str, defaults.backbone.arch),
        layers=get(bb, "layers", lambda s: tuple(int(x) for x in s.replace(",", " ").split()), defaults.backbone.layers),
        weights=get(bb, "weights", str, defaults.backbone.weights),
        neighborhood=get(bb, "neighborhood", int, defaults.backbone.neighborhood),
        seed=get(bb, "seed", int, defaults.backbone.seed),
    )
    bank_cfg = BankConfig(
        ratio=get(bank, "ratio", float, defaults.bank.ratio),
        cap=get(bank, "cap", int, defaults.bank.cap),
        rebuild_every=get(bank, "rebuild_every", int, defaults.bank.rebuild_every),
    )
    network = NetworkConfig(
        adapter_out_dim=get(net, "adapter_out_dim", int, defaults.network.adapter_out_dim),
        adapter_init_noise=get(net, "adapter_init_noise", float, defaults.network.adapter_init_noise),
        disc_hidden=get(net, "disc_hidden", int, defaults.network.disc_hidden),
        disc_depth=get(net, "disc_depth", int, defaults.network.disc_depth),
        disc_negative_slope=get(net, "disc_negative_slope", float, defaults.network.disc_negative_slope),
    )
    weights = LossWeights(
        lambda_pull=get(loss, "lambda_pull", float, defaults.loss.lambda_pull),
        lambda_push=get(loss, "lambda_push", float, defaults.loss.lambda_push),
        eps=get(loss, "eps", float, defaults.loss.eps),
        focal_gamma=get(loss, "focal_gamma", float, defaults.loss.focal_gamma),
        focal_alpha=get(loss, "focal_alpha", float, defaults.loss.focal_alpha),
    )
    pieg_cfg = PiegConfig(
        steps=get(pieg, "steps", int, defaults.pieg.steps),
        eta=get(pieg, "eta", float, defaults.pieg.eta),
        noise_mean=get(pieg, "noise_mean", float, defaults.pieg.noise_mean),
        noise_scale=get(pieg, "noise_scale", float, defaults.pieg.noise_scale),
        retain_noise=get(pieg, "retain_noise", _bool, defaults.pieg.retain_noise),
    )
    augment = AugmentSpec(
        rotation_deg=get(aug, "rotation_deg", float, defaults.augment.rotation_deg),
        translate_frac=get(aug, "translate_frac", float, defaults.augment.translate_frac),
        scale_range=(
            get(aug, "scale_lo", float, defaults.augment.scale_range[0]),
            get(aug, "scale_hi", float, defaults.augment.scale_range[1]),
        ),
        shear_deg=get(aug, "shear_deg", float, defaults.augment.shear_deg),
        elastic_alpha=get(aug, "elastic_alpha", float, defaults.augment.elastic_alpha),
        elastic_sigma=get(aug, "elastic_sigma", float, defaults.augment.elastic_sigma),
        p_affine=get(aug, "p_affine", float, defaults.augment.p_affine),
        p_elastic=get(aug, "p_elastic", float, defaults.augment.p_elastic),
    )
    anomaly = LocalAnomalySpec(
        beta_range=(
            get(anom, "beta_lo", float, defaults.anomaly.beta_range[0]),
            get(anom, "beta_hi", float, defaults.anomaly.beta_range[1]),
        ),
        area_range=(
            get(anom, "area_min", float, defaults.anomaly.area_range[0]),
            get(anom, "area_max", float, defaults.anomaly.area_range[1]),
        ),
    )
    texture_kind = get(anom, "texture", str, defaults.texture_kind)
    texture_folder = get(anom, "texture_folder", str, defaults.texture_folder)
    eval_cfg = EvalConfig(
        pro_fpr_limit=get(ev, "pro_fpr_limit", float, defaults.eval.pro_fpr_limit),
        dice_mode=get(ev, "dice_mode", str, defaults.eval.dice_mode),
        dice_tau=get(ev, "dice_tau", float, defaults.eval.dice_tau),
    )
    return RunConfig(
        seed=get(run, "seed", int, defaults.seed),
        epochs=get(run, "epochs", int, defaults.epochs),
        working_resolution=get(run, "working_resolution", int, defaults.working_resolution),
        adapter_lr=get(run, "adapter_lr", float, defaults.adapter_lr),
        disc_lr=get(run, "disc_lr", float, defaults.disc_lr),
        tau_policy=get(run, "tau_policy", str, defaults.tau_policy),
        tau_value=get(run, "tau_value", float, defaults.tau_value),
        smooth_sigma=get(run, "smooth_sigma", float, defaults.smooth_sigma),
        mask_mode=get(run, "mask_mode", str, defaults.mask_mode),
        use_llc=get(run, "use_llc", _bool, defaults.use_llc),
        use_lgc=get(run, "use_lgc", _bool, defaults.use_lgc),
        use_gpe_bce=get(run, "use_gpe_bce", _bool, defaults.use_gpe_bce),
        texture_kind=texture_kind,
        texture_folder=texture_folder,
        backbone=backbone,
        bank=bank_cfg,
        network=network,
        loss=weights,
        pieg=pieg_cfg,
        augment=augment,
        anomaly=anomaly,
        eval=eval_cfg,
    )


def dump_config(config: RunConfig) -> str:
    """Render a RunConfig back to its file format."""
    p = configparser.ConfigParser()
    p["run"] = {
        "seed": str(config.seed),
        "epochs": str(config.epochs),
        "working_resolution": str(config.working_resolution),
        "adapter_lr": repr(config.adapter_lr),
        "disc_lr": repr(config.disc_lr),
        "tau_policy": config.tau_policy,
        "tau_value": repr(config.tau_value),
        "smooth_sigma": repr(config.smooth_sigma),
        "mask_mode": config.mask_mode,
        "use_llc": str(config.use_llc).lower(),
        "use_lgc": str(config.use_lgc).lower(),
        "use_gpe_bce": str(config.use_gpe_bce).lower(),
    }
    p["backbone"] = {
        "arch": config.backbone.arch,
        "layers": " ".join(str(l) for l in config.backbone.layers),
        "weights": config.backbone.weights,
        "neighborhood": str(config.backbone.neighborhood),
        "seed": str(config.backbone.seed),
    }
    p["bank"] = {
        "ratio": repr(config.bank.ratio),
        "cap": str(config.bank.cap),
        "rebuild_every": str(config.bank.rebuild_every),
    }
    p["network"] = {
        "adapter_out_dim": str(config.network.adapter_out_dim),
        "adapter_init_noise": repr(config.network.adapter_init_noise),
        "disc_hidden": str(config.network.disc_hidden),
        "disc_depth": str(config.network.disc_depth),
        "disc_negative_slope": repr(config.network.disc_negative_slope),
    }
    p["loss"] = {
        "lambda_pull": repr(config.loss.lambda_pull),
        "lambda_push": repr(config.loss.lambda_push),
        "eps": repr(config.loss.eps),
        "focal_gamma": repr(config.loss.focal_gamma),
        "focal_alpha": repr(config.loss.focal_alpha),
    }
    p["pieg"] = {
        "steps": str(config.pieg.steps),
        "eta": repr(config.pieg.eta),
        "noise_mean": repr(config.pieg.noise_mean),
        "noise_scale": repr(config.pieg.noise_scale),
        "retain_noise": str(config.pieg.retain_noise).lower(),
    }
    p["augment"] = {
        "rotation_deg": repr(config.augment.rotation_deg),
        "translate_frac": repr(config.augment.translate_frac),
        "scale_lo": repr(config.augment.scale_range[0]),
        "scale_hi": repr(config.augment.scale_range[1]),
        "shear_deg": repr(config.augment.shear_deg),
        "elastic_alpha": repr(config.augment.elastic_alpha),
        "elastic_sigma": repr(config.augment.elastic_sigma),
        "p_affine": repr(config.augment.p_affine),
        "p_elastic": repr(config.augment.p_elastic),
    }
    p["anomaly"] = {
        "beta_lo": repr(config.anomaly.beta_range[0]),
        "beta_hi": repr(config.anomaly.beta_range[1]),
        "area_min": repr(config.anomaly.area_range[0]),
        "area_max": repr(config.anomaly.area_range[1]),
        "texture": config.texture_kind,
        "texture_folder": config.texture_folder,
    }
    p["eval"] = {
        "pro_fpr_limit": repr(config.eval.pro_fpr_limit),
        "dice_mode": config.eval.dice_mode,
        "dice_tau": repr(config.eval.dice_tau),
    }
    buf = io.StringIO()
    p.write(buf)
    return buf.getvalue()


def save_config(config: RunConfig, path: Path | str) -> None:
    Path(path).write_text(dump_config(config))
