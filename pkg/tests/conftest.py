import numpy as np
import pytest
import torch

from fewpad.backbone import FeatureExtractor
from fewpad.config import BackboneConfig, BankConfig, NetworkConfig, RunConfig
from fewpad.pieg import PiegConfig
from fewpad.synthesis import AugmentSpec, LocalAnomalySpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_extractor():
    return FeatureExtractor(arch="tinycnn", weights="random", seed=0, neighborhood=3)


def tiny_config(**overrides) -> RunConfig:
    """Fast RunConfig for pipeline-level tests: tiny backbone, few steps."""
    base = dict(
        seed=0,
        epochs=3,
        working_resolution=32,
        backbone=BackboneConfig(arch="tinycnn", weights="random", neighborhood=3, seed=0),
        bank=BankConfig(ratio=0.5, cap=64),
        network=NetworkConfig(disc_hidden=32, disc_depth=2),
        pieg=PiegConfig(steps=2, eta=0.01),
        augment=AugmentSpec(p_affine=1.0, p_elastic=0.0, elastic_alpha=4.0, elastic_sigma=2.0),
        anomaly=LocalAnomalySpec(area_range=(0.02, 0.2)),
        smooth_sigma=0.0,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def toy_pair():
    from fewpad.data import ToySpec, make_toy_dataset

    return make_toy_dataset(
        ToySpec(image_size=32, k_train=2, n_normal_test=3, n_anomalous_test=3, blob_area_range=(20, 60)),
        seed=7,
    )
