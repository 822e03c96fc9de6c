import numpy as np
import pytest
import torch

from fewpad.backbone import EmbeddingGrid
from fewpad.bank import AnchorBank, build_bank, kcenter_select, load_bank, nearest_distance, save_bank


def greedy_kcenter_oracle(pool: np.ndarray, k: int, start: int) -> list[int]:
    """Naive re-implementation: nested loops, no incremental bookkeeping."""
    selected = [start]
    while len(selected) < k:
        best_idx, best_dist = -1, -1.0
        for i in range(pool.shape[0]):
            if i in selected:
                continue
            nearest = min(float(np.sum((pool[i] - pool[j]) ** 2)) for j in selected)
            if nearest > best_dist:
                best_dist, best_idx = nearest, i
        selected.append(best_idx)
    return selected


def grid_from(values: np.ndarray, space: str = "raw") -> EmbeddingGrid:
    return EmbeddingGrid(values=torch.as_tensor(values, dtype=torch.float64), stride=8, space=space)


class TestKCenterSelect:
    def test_hand_run_1d(self):
        # pool {0, 1, 10}: from 0 the farthest point is 10
        pool = np.array([[0.0], [1.0], [10.0]])
        assert set(kcenter_select(pool, 2, start=0)) == {0, 2}

    def test_matches_oracle_on_random_pools(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            n = int(rng.integers(2, 65))
            d = int(rng.integers(1, 6))
            pool = rng.normal(size=(n, d))
            k = int(rng.integers(1, n + 1))
            start = int(rng.integers(0, n))
            assert kcenter_select(pool, k, start=start) == greedy_kcenter_oracle(pool, k, start)

    def test_k_equals_n_selects_everything(self):
        pool = np.random.default_rng(1).normal(size=(17, 3))
        assert sorted(kcenter_select(pool, 17, start=4)) == list(range(17))

    def test_empty_pool_fatal(self):
        with pytest.raises(ValueError, match="empty"):
            kcenter_select(np.zeros((0, 3)), 1, start=0)


class TestBuildBank:
    def test_ratio_one_equals_pool(self):
        rng = np.random.default_rng(2)
        grids = [grid_from(rng.normal(size=(3, 2, 5))) for _ in range(2)]
        bank = build_bank(grids, ratio=1.0, cap=1000, seed=0)
        pool = np.concatenate([g.values.reshape(-1, 5).numpy() for g in grids])
        assert bank.size == pool.shape[0]
        got = {tuple(np.float32(v)) for v in bank.anchors.numpy()}
        want = {tuple(v.astype(np.float32)) for v in pool}
        assert got == want

    def test_k_formula_and_cap(self):
        rng = np.random.default_rng(3)
        grids = [grid_from(rng.normal(size=(4, 4, 3)))]  # pool of 16
        assert build_bank(grids, ratio=0.5, cap=100, seed=0).size == 8
        assert build_bank(grids, ratio=0.5, cap=5, seed=0).size == 5
        assert build_bank(grids, ratio=0.01, cap=100, seed=0).size == 1

    def test_metadata(self):
        rng = np.random.default_rng(4)
        grids = [grid_from(rng.normal(size=(2, 2, 3)))]
        bank = build_bank(grids, ratio=0.5, cap=10, seed=42, source_ids=["a", "b"])
        assert bank.seed == 42
        assert bank.source_ids == ("a", "b")
        assert len(bank.indices) == bank.size == len(set(bank.indices))

    def test_dim_mismatch_fatal(self):
        rng = np.random.default_rng(5)
        grids = [grid_from(rng.normal(size=(2, 2, 3))), grid_from(rng.normal(size=(2, 2, 4)))]
        with pytest.raises(ValueError, match="channel dimension"):
            build_bank(grids, ratio=0.5, cap=10, seed=0)


class TestNearestDistance:
    def test_membership_zero(self):
        rng = np.random.default_rng(6)
        grids = [grid_from(rng.normal(size=(2, 2, 4)))]
        bank = build_bank(grids, ratio=1.0, cap=100, seed=0)
        probe = torch.zeros(1, 1, 4, dtype=torch.float64)
        probe[0, 0] = bank.anchors[2]
        d = nearest_distance(bank, probe)
        assert float(d[0, 0]) == 0.0

    def test_single_anchor_exact(self):
        a = np.array([1.0, -2.0, 0.5])
        v = np.array([0.0, 1.0, 2.0])
        bank = AnchorBank(anchors=torch.as_tensor(a[None]), space="raw")
        d = nearest_distance(bank, torch.as_tensor(v).reshape(1, 1, 3))
        assert abs(float(d[0, 0]) - float(np.linalg.norm(v - a))) < 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        anchors = rng.normal(size=(8, 4))
        grid = rng.normal(size=(2, 2, 4))
        bank = AnchorBank(anchors=torch.as_tensor(anchors), space="raw")
        d = nearest_distance(bank, torch.as_tensor(grid)).numpy()
        for r in range(2):
            for c in range(2):
                expected = min(np.linalg.norm(grid[r, c] - a) for a in anchors)
                assert abs(d[r, c] - expected) < 1e-9

    def test_dim_mismatch_fatal(self):
        bank = AnchorBank(anchors=torch.zeros(2, 3, dtype=torch.float64), space="raw")
        with pytest.raises(ValueError, match="dim"):
            nearest_distance(bank, torch.zeros(1, 1, 4, dtype=torch.float64))

    def test_one_lipschitz_in_query(self):
        rng = np.random.default_rng(8)
        bank = AnchorBank(anchors=torch.as_tensor(rng.normal(size=(6, 5))), space="raw")
        for _ in range(200):
            v = torch.as_tensor(rng.normal(size=(1, 1, 5)))
            w = torch.as_tensor(rng.normal(size=(1, 1, 5)))
            dv = float(nearest_distance(bank, v))
            dw = float(nearest_distance(bank, w))
            assert abs(dv - dw) <= float(torch.linalg.norm(v - w)) + 1e-12

    def test_adding_anchor_never_increases(self):
        rng = np.random.default_rng(9)
        anchors = rng.normal(size=(5, 4))
        extra = np.concatenate([anchors, rng.normal(size=(1, 4))])
        grid = torch.as_tensor(rng.normal(size=(3, 3, 4)))
        d_small = nearest_distance(AnchorBank(anchors=torch.as_tensor(anchors), space="raw"), grid)
        d_big = nearest_distance(AnchorBank(anchors=torch.as_tensor(extra), space="raw"), grid)
        assert (d_big <= d_small + 1e-12).all()

    def test_greedy_radius_invariant(self):
        # every pool point is within the last greedy radius of the bank
        rng = np.random.default_rng(10)
        pool = rng.normal(size=(40, 3))
        idx = kcenter_select(pool, 8, start=0)
        bank = AnchorBank(anchors=torch.as_tensor(pool[idx]), space="raw")
        d_all = nearest_distance(bank, torch.as_tensor(pool).reshape(40, 1, 3)).numpy().ravel()
        # the greedy radius after selecting k centers: distance of the last-added point
        # to the centers before it
        prev = pool[idx[:-1]]
        radius = min(np.linalg.norm(pool[idx[-1]] - p) for p in prev)
        assert d_all.max() <= radius + 1e-9

    def test_gradient_flows_to_query(self):
        bank = AnchorBank(anchors=torch.tensor([[0.0, 0.0], [4.0, 0.0]], dtype=torch.float64), space="raw")
        v = torch.tensor([[[1.0, 1.0]]], dtype=torch.float64, requires_grad=True)
        d = nearest_distance(bank, v).sum()
        d.backward()
        # nearest anchor is the origin; gradient is the unit vector away from it
        expected = np.array([1.0, 1.0]) / np.sqrt(2.0)
        np.testing.assert_allclose(v.grad[0, 0].numpy(), expected, atol=1e-12)


class TestBankIO:
    def _bank(self):
        rng = np.random.default_rng(11)
        grids = [grid_from(rng.normal(size=(3, 3, 4)))]
        return build_bank(grids, ratio=0.5, cap=10, seed=5, source_ids=["img1"])

    def test_round_trip_bit_identical(self, tmp_path):
        bank = self._bank()
        save_bank(bank, tmp_path / "b.fpab")
        loaded = load_bank(tmp_path / "b.fpab")
        assert torch.equal(bank.anchors, loaded.anchors)
        assert loaded.seed == bank.seed
        assert loaded.ratio == bank.ratio
        assert loaded.source_ids == bank.source_ids
        assert loaded.indices == bank.indices
        assert loaded.space == bank.space

    def test_truncated_file_errors(self, tmp_path):
        bank = self._bank()
        save_bank(bank, tmp_path / "b.fpab")
        raw = (tmp_path / "b.fpab").read_bytes()
        (tmp_path / "cut.fpab").write_bytes(raw[:-7])
        with pytest.raises(ValueError, match="corrupt"):
            load_bank(tmp_path / "cut.fpab")

    def test_wrong_magic_errors(self, tmp_path):
        (tmp_path / "junk.fpab").write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="not an anchor bank"):
            load_bank(tmp_path / "junk.fpab")

    def test_save_is_deterministic(self, tmp_path):
        bank = self._bank()
        save_bank(bank, tmp_path / "a.fpab")
        save_bank(bank, tmp_path / "b.fpab")
        assert (tmp_path / "a.fpab").read_bytes() == (tmp_path / "b.fpab").read_bytes()
