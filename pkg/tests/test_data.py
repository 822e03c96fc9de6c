import json

import numpy as np
import pytest
from scipy.ndimage import label as cc_label

from fewpad.data import (
    ImageSample,
    TextureSource,
    ToySpec,
    load_dataset,
    make_toy_dataset,
    preprocess_to_square,
    restore_from_square,
    sample_texture,
    save_image,
    write_dataset,
)


def _write_png(path, shape=(12, 10), value=0.5):
    save_image(path, np.full(shape + (3,), value))


class TestLoadDataset:
    def test_empty_train_folder(self, tmp_path):
        (tmp_path / "train" / "good").mkdir(parents=True)
        samples = load_dataset(tmp_path, "train")
        assert samples == []

    def test_two_images_no_masks(self, tmp_path):
        folder = tmp_path / "train" / "good"
        folder.mkdir(parents=True)
        _write_png(folder / "b.png")
        _write_png(folder / "a.png")
        samples = load_dataset(tmp_path, "train")
        assert len(samples) == 2
        assert all(s.mask is None for s in samples)
        assert [s.id for s in samples] == sorted(s.id for s in samples)

    def test_test_split_pairs_masks(self, tmp_path):
        # 3 bad images, masks for exactly 2 of them; enumerate by hand
        (tmp_path / "test" / "good").mkdir(parents=True)
        bad = tmp_path / "test" / "bad"
        masks = tmp_path / "test" / "bad_masks"
        bad.mkdir()
        masks.mkdir()
        expected = {}
        for name, has_mask in [("i0", True), ("i1", False), ("i2", True)]:
            _write_png(bad / f"{name}.png")
            if has_mask:
                m = np.zeros((12, 10))
                m[2:5, 3:6] = 1.0
                save_image(masks / f"{name}.png", m)
            expected[f"test/bad/{name}"] = has_mask
        samples = load_dataset(tmp_path, "test")
        assert len(samples) == 3
        got = {s.id: s.mask is not None for s in samples}
        assert got == expected
        assert sum(1 for s in samples if s.mask is not None) == 2

    def test_missing_root_fatal(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope", "train")

    def test_unreadable_image_skipped_and_recorded(self, tmp_path):
        folder = tmp_path / "train" / "good"
        folder.mkdir(parents=True)
        _write_png(folder / "ok.png")
        (folder / "broken.png").write_bytes(b"this is not a png")
        samples = load_dataset(tmp_path, "train")
        assert [s.id for s in samples] == ["train/good/ok"]
        manifest = json.loads((tmp_path / "manifest-train.json").read_text())
        assert len(manifest["skipped"]) == 1
        assert "broken" in manifest["skipped"][0]["path"]

    def test_mask_shape_mismatch_fatal(self, tmp_path):
        (tmp_path / "test" / "good").mkdir(parents=True)
        bad = tmp_path / "test" / "bad"
        masks = tmp_path / "test" / "bad_masks"
        bad.mkdir()
        masks.mkdir()
        _write_png(bad / "x.png", shape=(12, 10))
        save_image(masks / "x.png", np.ones((6, 6)))
        with pytest.raises(ValueError, match="does not match"):
            load_dataset(tmp_path, "test")

    def test_order_deterministic(self, tmp_path):
        folder = tmp_path / "train" / "good"
        folder.mkdir(parents=True)
        for name in ["c", "a", "b"]:
            _write_png(folder / f"{name}.png")
        first = [s.id for s in load_dataset(tmp_path, "train")]
        second = [s.id for s in load_dataset(tmp_path, "train")]
        assert first == second == ["train/good/a", "train/good/b", "train/good/c"]

    def test_pixels_in_unit_range(self, tmp_path):
        folder = tmp_path / "train" / "good"
        folder.mkdir(parents=True)
        _write_png(folder / "a.png", value=1.0)
        (s,) = load_dataset(tmp_path, "train")
        assert np.isfinite(s.pixels).all()
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0


class TestImageSample:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageSample(pixels=np.full((4, 4, 3), 1.5), id="x")

    def test_rejects_mask_mismatch(self):
        with pytest.raises(ValueError):
            ImageSample(pixels=np.zeros((4, 4, 3)), mask=np.zeros((3, 3), dtype=np.uint8), id="x")

    def test_rejects_marked_mask_with_normal_label(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = 1
        with pytest.raises(ValueError):
            ImageSample(pixels=np.zeros((4, 4, 3)), mask=mask, label=0, id="x")


class TestSampleTexture:
    def test_procedural_deterministic(self):
        src = TextureSource(kind="procedural", seed=3)
        a = sample_texture(src, (16, 16, 3), np.random.default_rng(5))
        b = sample_texture(src, (16, 16, 3), np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_procedural_statistics(self):
        patch = sample_texture(TextureSource(seed=0), (32, 32, 3), np.random.default_rng(0))
        assert patch.shape == (32, 32, 3)
        assert patch.min() >= 0.0 and patch.max() <= 1.0
        assert patch.var() > 0.0

    def test_folder_upscales_small_texture(self, tmp_path):
        _write_png(tmp_path / "tex.png", shape=(8, 8), value=0.3)
        src = TextureSource(kind="folder", folder=tmp_path, seed=0)
        patch = sample_texture(src, (16, 16, 3), np.random.default_rng(0))
        assert patch.shape == (16, 16, 3)
        assert patch.min() >= 0.0 and patch.max() <= 1.0

    def test_empty_folder_falls_back(self, tmp_path):
        src = TextureSource(kind="folder", folder=tmp_path, seed=0)
        patch = sample_texture(src, (8, 8, 3), np.random.default_rng(0))
        assert patch.shape == (8, 8, 3)
        assert patch.var() > 0.0


class TestMakeToyDataset:
    def test_count_contract(self):
        spec = ToySpec(image_size=32, k_train=2, n_normal_test=10, n_anomalous_test=10, blob_area_range=(20, 60))
        train, test = make_toy_dataset(spec, seed=0)
        assert len(train) == 2
        assert len(test) == 20
        assert sum(1 for s in test if s.mask is not None and s.mask.any()) == 10

    def test_deterministic(self):
        spec = ToySpec(image_size=32, k_train=2, n_normal_test=3, n_anomalous_test=3, blob_area_range=(20, 60))
        a_train, a_test = make_toy_dataset(spec, seed=9)
        b_train, b_test = make_toy_dataset(spec, seed=9)
        for sa, sb in zip(a_train + a_test, b_train + b_test):
            np.testing.assert_array_equal(sa.pixels, sb.pixels)
            if sa.mask is not None:
                np.testing.assert_array_equal(sa.mask, sb.mask)

    def test_blob_component_areas_within_range(self):
        spec = ToySpec(image_size=64, k_train=1, n_normal_test=0, n_anomalous_test=10, blob_area_range=(30, 160))
        _, test = make_toy_dataset(spec, seed=1)
        for s in test:
            lab, count = cc_label(s.mask, structure=np.ones((3, 3), dtype=int))
            assert count >= 1
            for r in range(1, count + 1):
                area = int((lab == r).sum())
                assert 30 <= area <= 160

    def test_masks_exactly_cover_injection(self):
        # regenerate each anomalous image's clean twin from its substream:
        # unmasked pixels must match it exactly, masked pixels must all differ
        from fewpad.data import _toy_background, toy_rng

        spec = ToySpec(image_size=32, k_train=1, n_normal_test=0, n_anomalous_test=5, blob_area_range=(20, 60))
        _, test = make_toy_dataset(spec, seed=2)
        for i, s in enumerate(test):
            twin = _toy_background(32, toy_rng(2, 2, i), spec.texture_amplitude)
            changed = s.mask.astype(bool)
            np.testing.assert_array_equal(s.pixels[~changed], twin[~changed])
            assert np.all(np.any(s.pixels[changed] != twin[changed], axis=-1))
            assert set(np.unique(s.mask)) <= {0, 1}
            assert s.label == 1


class TestPreprocess:
    def test_square_passthrough_shape(self):
        img = np.random.default_rng(0).uniform(size=(32, 32, 3))
        canvas, box = preprocess_to_square(img, 64)
        assert canvas.shape == (64, 64, 3)
        assert (box.top, box.left, box.height, box.width) == (0, 0, 64, 64)

    def test_aspect_preserving_pad(self):
        img = np.random.default_rng(0).uniform(size=(20, 40, 3))
        canvas, box = preprocess_to_square(img, 64)
        assert canvas.shape == (64, 64, 3)
        assert box.width == 64 and box.height == 32
        scores = np.random.default_rng(1).uniform(size=(64, 64))
        restored = restore_from_square(scores, box)
        assert restored.shape == (20, 40)

    def test_values_stay_in_range(self):
        img = np.random.default_rng(0).uniform(size=(17, 23, 3))
        canvas, _ = preprocess_to_square(img, 48)
        assert canvas.min() >= 0.0 and canvas.max() <= 1.0


class TestWriteDataset:
    def test_round_trip_layout(self, tmp_path):
        spec = ToySpec(image_size=32, k_train=2, n_normal_test=2, n_anomalous_test=2, blob_area_range=(20, 60))
        train, test = make_toy_dataset(spec, seed=0)
        write_dataset(train, test, tmp_path)
        loaded_train = load_dataset(tmp_path, "train")
        loaded_test = load_dataset(tmp_path, "test")
        assert len(loaded_train) == 2
        assert len(loaded_test) == 4
        assert sum(1 for s in loaded_test if s.mask is not None) == 2
        # 8-bit quantisation bounds the reload error
        for orig, back in zip(sorted(test, key=lambda s: s.id), loaded_test):
            assert np.abs(orig.pixels - back.pixels).max() <= 0.5 / 255 + 1e-12
