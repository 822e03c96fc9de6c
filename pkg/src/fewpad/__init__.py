"""fewpad: few-shot unsupervised pathology detection.

Learns from a handful of non-pathological images by anchoring adapted
features to a coreset bank, contrasting them against locally corrupted
images and gradient-synthesised pathological embeddings, and scoring
pixels with a per-location discriminator.
"""

__version__ = "0.1.0"

from .backbone import EmbeddingGrid, FeatureExtractor, register_backbone
from .bank import AnchorBank, build_bank, kcenter_select, load_bank, nearest_distance, save_bank
from .config import RunConfig, load_config, parse_config, save_config
from .data import ImageSample, TextureSource, ToySpec, load_dataset, make_toy_dataset, sample_texture
from .losses import (
    LossReport,
    LossWeights,
    bce_loss,
    d_global,
    d_local,
    downsample_mask,
    focal_loss,
    global_loss,
    local_loss,
    total_loss,
    tritanh,
)
from .metrics import EvalReport, auroc, dice_iou, evaluate, export_embeddings, pro, read_embedding_export
from .network import AdapterSpec, Discriminator, DiscriminatorSpec, FeatureAdapter
from .pieg import GpeResult, PiegConfig, generate_gpe, init_gpe
from .pipeline import AnomalyMap, Checkpoint, benchmark, infer, select_threshold, train
from .synthesis import AugmentSpec, CorruptResult, LocalAnomalySpec, augment, corrupt

__all__ = [
    "AnchorBank",
    "AnomalyMap",
    "AdapterSpec",
    "AugmentSpec",
    "Checkpoint",
    "CorruptResult",
    "Discriminator",
    "DiscriminatorSpec",
    "EmbeddingGrid",
    "EvalReport",
    "FeatureAdapter",
    "FeatureExtractor",
    "GpeResult",
    "ImageSample",
    "LocalAnomalySpec",
    "LossReport",
    "LossWeights",
    "PiegConfig",
    "RunConfig",
    "TextureSource",
    "ToySpec",
    "auroc",
    "bce_loss",
    "benchmark",
    "build_bank",
    "corrupt",
    "augment",
    "d_global",
    "d_local",
    "dice_iou",
    "downsample_mask",
    "evaluate",
    "export_embeddings",
    "focal_loss",
    "generate_gpe",
    "global_loss",
    "infer",
    "init_gpe",
    "kcenter_select",
    "load_bank",
    "load_config",
    "load_dataset",
    "local_loss",
    "make_toy_dataset",
    "nearest_distance",
    "parse_config",
    "pro",
    "read_embedding_export",
    "register_backbone",
    "sample_texture",
    "save_bank",
    "save_config",
    "select_threshold",
    "total_loss",
    "train",
    "tritanh",
]
