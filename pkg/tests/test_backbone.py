import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from fewpad.backbone import EmbeddingGrid, FeatureExtractor, grid_values


@pytest.fixture(scope="module")
def resnet_extractor():
    return FeatureExtractor(arch="resnet18", weights="random", seed=0, neighborhood=3)


class TestExtract:
    def test_resnet18_shape_at_256(self, resnet_extractor):
        # layer2 (stride 8, 128 ch) + upsampled layer3 (stride 16, 256 ch)
        img = np.random.default_rng(0).uniform(size=(256, 256, 3))
        grid = resnet_extractor.extract(img)
        assert grid.values.shape == (32, 32, 384)
        assert grid.stride == 8
        assert grid.space == "raw"

    def test_constant_zero_input_finite(self, resnet_extractor):
        grid = resnet_extractor.extract(np.zeros((64, 64, 3)))
        assert torch.isfinite(grid.values).all()

    def test_deterministic(self, resnet_extractor):
        img = np.random.default_rng(1).uniform(size=(64, 64, 3))
        a = resnet_extractor.extract(img)
        b = resnet_extractor.extract(img)
        torch.testing.assert_close(a.values, b.values, rtol=0, atol=0)

    def test_pure_function_of_pixels(self, resnet_extractor):
        # interleaving other extractions must not change the result
        rng = np.random.default_rng(2)
        img = rng.uniform(size=(64, 64, 3))
        a = resnet_extractor.extract(img)
        resnet_extractor.extract(rng.uniform(size=(64, 64, 3)))
        b = resnet_extractor.extract(img)
        torch.testing.assert_close(a.values, b.values, rtol=0, atol=0)

    def test_translation_shifts_grid_one_cell(self, resnet_extractor):
        # smooth image translated by one stride: grids correlate cell-shifted
        rng = np.random.default_rng(3)
        big = gaussian_filter(rng.uniform(size=(320, 320)), 12.0)
        big = (big - big.min()) / (big.max() - big.min())
        stride = 8
        img = np.repeat(big[:256, :256, None], 3, axis=2)
        shifted = np.repeat(big[:256, stride : 256 + stride, None], 3, axis=2)
        g = resnet_extractor.extract(img).values.numpy()
        gs = resnet_extractor.extract(shifted).values.numpy()
        a = g[:, 1:, :].ravel()
        b = gs[:, :-1, :].ravel()
        corr = np.corrcoef(a, b)[0, 1]
        assert corr > 0.9

    def test_batch_matches_single(self, resnet_extractor):
        # float32 convs reduce in a batch-size-dependent order, so batched
        # and single extraction agree only to float32 noise
        rng = np.random.default_rng(4)
        imgs = [rng.uniform(size=(64, 64, 3)) for _ in range(2)]
        batch = resnet_extractor.extract_batch(imgs)
        for im, g in zip(imgs, batch):
            torch.testing.assert_close(resnet_extractor.extract(im).values, g.values, rtol=0, atol=1e-3)

    def test_neighborhood_off_changes_values(self):
        img = np.random.default_rng(5).uniform(size=(64, 64, 3))
        agg = FeatureExtractor(arch="tinycnn", weights="random", seed=0, neighborhood=3)
        raw = FeatureExtractor(arch="tinycnn", weights="random", seed=0, neighborhood=0)
        a = agg.extract(img).values
        b = raw.extract(img).values
        assert a.shape == b.shape
        assert not torch.allclose(a, b)

    def test_unknown_arch_rejected(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            FeatureExtractor(arch="resnet99")

    def test_seeded_random_weights_reproducible(self):
        img = np.random.default_rng(6).uniform(size=(32, 32, 3))
        a = FeatureExtractor(arch="tinycnn", weights="random", seed=11).extract(img)
        b = FeatureExtractor(arch="tinycnn", weights="random", seed=11).extract(img)
        c = FeatureExtractor(arch="tinycnn", weights="random", seed=12).extract(img)
        torch.testing.assert_close(a.values, b.values, rtol=0, atol=0)
        assert not torch.allclose(a.values, c.values)


class TestEmbeddingGrid:
    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            EmbeddingGrid(values=torch.zeros(4, 4), stride=8)

    def test_rejects_bad_space(self):
        with pytest.raises(ValueError):
            EmbeddingGrid(values=torch.zeros(2, 2, 3), stride=8, space="latent")

    def test_grid_values_coercion(self):
        t = torch.zeros(2, 2, 3, dtype=torch.float64)
        g = EmbeddingGrid(values=t, stride=8)
        assert grid_values(g) is t
        assert grid_values(t) is t
