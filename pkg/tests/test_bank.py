import itertools

import numpy as np
import pytest

from patchbank.bank import (
    BankConfig,
    MemoryBank,
    NeighborSet,
    build_bank,
    compressed_count,
    ema_update,
    kmeans_init,
    knn,
    load_bank,
    match_nearest_unused,
    nearest_centers,
    save_bank,
)
from patchbank.descriptor import embed_grid, init_descriptor
from patchbank.errors import (
    BadMagicError,
    FeatureFormatError,
    ManifestError,
    TruncatedPayloadError,
    ValidationError,
)
from patchbank.featureio import read_feature_set
from patchbank.patches import assemble_patch_grid

from conftest import make_manifest


def sq_dist(a, b):
    return float(np.sum((np.asarray(a, dtype=np.float64) - b) ** 2))


def greedy_match_oracle(centers, points):
    """Literal transcription of the matching rule: centers in index order,
    each takes its nearest patch among those not already taken."""
    used = set()
    out = []
    for c in centers:
        best_t, best_d = None, np.inf
        for t, p in enumerate(points):
            if t in used:
                continue
            d = sq_dist(p, c)
            if d < best_d:
                best_t, best_d = t, d
        used.add(best_t)
        out.append(points[best_t])
    return np.array(out)


def best_two_means(points):
    """Exhaustive optimum over all 2-cluster assignments of <= 8 points."""
    best = (np.inf, None)
    n = len(points)
    for labels in itertools.product([0, 1], repeat=n):
        labels = np.array(labels)
        if labels.min() == labels.max():
            continue
        inertia = 0.0
        centers = []
        for j in (0, 1):
            cluster = points[labels == j]
            mean = cluster.mean(axis=0)
            centers.append(mean)
            inertia += float(np.sum((cluster - mean) ** 2))
        if inertia < best[0]:
            best = (inertia, np.array(centers))
    return best


class TestCompressedCount:
    def test_values(self):
        assert compressed_count(1.0, 7) == 7
        assert compressed_count(0.5, 4) == 2
        assert compressed_count(0.5, 5) == 3  # half rounds up
        assert compressed_count(0.25, 10) == 3
        assert compressed_count(0.1, 4) == 1  # floored at one center

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            compressed_count(0.0, 10)
        with pytest.raises(ValidationError):
            compressed_count(1.5, 10)


class TestKmeans:
    def test_size_equals_count_reproduces_points(self, rng):
        points = rng.standard_normal((6, 3))
        bank = kmeans_init(points, size=6, seed=0)
        order_a = np.lexsort(bank.centers.T)
        order_b = np.lexsort(points.T)
        np.testing.assert_allclose(bank.centers[order_a], points[order_b], rtol=1e-12)

    def test_single_center_is_mean(self, rng):
        points = rng.standard_normal((9, 4))
        bank = kmeans_init(points, size=1, seed=5)
        np.testing.assert_allclose(bank.centers[0], points.mean(axis=0), rtol=1e-12)

    def test_two_blobs_match_exhaustive_optimum(self, rng):
        blob_a = rng.standard_normal((4, 2)) * 0.1 + [10.0, 0.0]
        blob_b = rng.standard_normal((4, 2)) * 0.1 + [-10.0, 0.0]
        points = np.concatenate([blob_a, blob_b])
        bank = kmeans_init(points, size=2, seed=1)
        opt_inertia, opt_centers = best_two_means(points)
        _, best = nearest_centers(points, bank.centers, 1)
        assert abs(float(best.sum()) - opt_inertia) < 1e-9
        got = bank.centers[np.argsort(bank.centers[:, 0])]
        want = opt_centers[np.argsort(opt_centers[:, 0])]
        np.testing.assert_allclose(got, want, rtol=1e-9)

    def test_grid_and_points_inputs_agree(self, rng):
        grid = rng.standard_normal((3, 2, 4))
        points = grid.reshape(3, -1).T
        a = kmeans_init(grid, size=3, seed=7)
        b = kmeans_init(points, size=3, seed=7)
        assert a.centers.tobytes() == b.centers.tobytes()

    def test_deterministic_per_seed(self, rng):
        points = rng.standard_normal((20, 4))
        a = kmeans_init(points, size=5, seed=42)
        b = kmeans_init(points.copy(), size=5, seed=42)
        assert a.centers.tobytes() == b.centers.tobytes()

    def test_rejects_too_many_clusters(self, rng):
        with pytest.raises(ValidationError):
            kmeans_init(rng.standard_normal((4, 2)), size=5, seed=0)


class TestMatching:
    def test_identity_when_points_equal_centers(self, rng):
        centers = rng.standard_normal((5, 3))
        matched = match_nearest_unused(MemoryBank(centers=centers.copy()), centers.copy())
        np.testing.assert_array_equal(matched, centers)

    def test_single_center_takes_argmin(self, rng):
        points = rng.standard_normal((7, 2))
        center = rng.standard_normal(2)
        matched = match_nearest_unused(MemoryBank(centers=center[None]), points)
        dists = [sq_dist(p, center) for p in points]
        np.testing.assert_array_equal(matched[0], points[int(np.argmin(dists))])

    def test_greedy_order_beats_global_reasoning(self):
        # Center 0 grabs the point center 1 needed; the globally cheaper
        # assignment would swap them. The greedy rule is intentional.
        centers = np.array([[5.0], [5.5]])
        points = np.array([[5.4], [0.0], [100.0]])
        matched = match_nearest_unused(MemoryBank(centers=centers), points)
        np.testing.assert_array_equal(matched, [[5.4], [0.0]])
        greedy_cost = sq_dist(matched[0], centers[0]) + sq_dist(matched[1], centers[1])
        swapped_cost = sq_dist(points[1], centers[0]) + sq_dist(points[0], centers[1])
        assert swapped_cost < greedy_cost

    def test_matches_transcription_oracle(self, rng):
        for _ in range(25):
            m = int(rng.integers(1, 6))
            t = int(rng.integers(m, m + 5))
            centers = rng.standard_normal((m, 3))
            points = rng.standard_normal((t, 3))
            got = match_nearest_unused(MemoryBank(centers=centers), points)
            np.testing.assert_array_equal(got, greedy_match_oracle(centers, points))

    def test_one_to_one(self, rng):
        points = rng.standard_normal((6, 2))
        matched = match_nearest_unused(MemoryBank(centers=points[::-1].copy()), points)
        assert len(np.unique(matched, axis=0)) == 6

    def test_tie_takes_lower_patch_index(self):
        points = np.array([[1.0], [-1.0]])
        matched = match_nearest_unused(MemoryBank(centers=np.array([[0.0]])), points)
        np.testing.assert_array_equal(matched, [[1.0]])

    def test_rejects_too_few_points(self, rng):
        bank = MemoryBank(centers=rng.standard_normal((4, 2)))
        with pytest.raises(ValidationError):
            match_nearest_unused(bank, rng.standard_normal((3, 2)))


class TestEmaUpdate:
    def test_beta_one_replaces(self, rng):
        bank = MemoryBank(centers=rng.standard_normal((3, 2)))
        matched = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(ema_update(bank, matched, 1.0).centers, matched)

    def test_midpoint(self):
        bank = MemoryBank(centers=np.zeros((2, 2)))
        out = ema_update(bank, np.full((2, 2), 2.0), 0.5)
        np.testing.assert_array_equal(out.centers, np.ones((2, 2)))

    def test_geometric_convergence(self, rng):
        start = rng.standard_normal((4, 3))
        target = rng.standard_normal((4, 3))
        beta = 0.1
        bank = MemoryBank(centers=start.copy())
        initial = np.linalg.norm(start - target)
        for i in range(1, 12):
            bank = ema_update(bank, target, beta)
            expected = (1.0 - beta) ** i * initial
            assert abs(np.linalg.norm(bank.centers - target) - expected) < 1e-9 * max(expected, 1)

    def test_affine_shift(self, rng):
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((3, 2))
        delta = rng.standard_normal(2)
        plain = ema_update(MemoryBank(centers=a), b, 0.3).centers
        shifted = ema_update(MemoryBank(centers=a + delta), b + delta, 0.3).centers
        np.testing.assert_allclose(shifted, plain + delta, rtol=1e-12)

    def test_rejects_bad_beta(self, rng):
        bank = MemoryBank(centers=rng.standard_normal((2, 2)))
        for beta in (0.0, -0.1, 1.5):
            with pytest.raises(ValidationError):
                ema_update(bank, bank.centers, beta)


class TestBuildBank:
    def test_single_sample_is_kmeans(self, tmp_path, rng):
        manifest = make_manifest(tmp_path, rng, train=1, test_normal=0, test_anomalous=0)
        desc = init_descriptor(8, 4, seed=2)
        config = BankConfig(gamma_c=0.5, seed=3)
        bank = build_bank(manifest, desc, config)
        grid = assemble_patch_grid(read_feature_set(manifest.train_entries[0].feature_path))
        expected = kmeans_init(embed_grid(desc, grid), compressed_count(0.5, 16),
                               config.kmeans_iters, 3)
        np.testing.assert_array_equal(bank.centers, expected.centers)

    def test_two_samples_beta_one_is_matched_second(self, tmp_path, rng):
        manifest = make_manifest(tmp_path, rng, train=2, test_normal=0, test_anomalous=0)
        desc = init_descriptor(8, 4, seed=2)
        config = BankConfig(gamma_c=0.5, ema_beta=1.0, seed=3)
        bank = build_bank(manifest, desc, config)
        embeds = [
            embed_grid(desc, assemble_patch_grid(read_feature_set(e.feature_path)))
            for e in manifest.train_entries
        ]
        init = kmeans_init(embeds[0], compressed_count(0.5, 16), config.kmeans_iters, 3)
        np.testing.assert_array_equal(bank.centers, match_nearest_unused(init, embeds[1]))

    def test_three_samples_compose_step_by_step(self, tmp_path, rng):
        manifest = make_manifest(tmp_path, rng, train=3, test_normal=0, test_anomalous=0)
        desc = init_descriptor(8, 4, seed=6)
        config = BankConfig(gamma_c=0.25, ema_beta=0.1, seed=9)
        bank = build_bank(manifest, desc, config)
        embeds = [
            embed_grid(desc, assemble_patch_grid(read_feature_set(e.feature_path)))
            for e in manifest.train_entries
        ]
        manual = kmeans_init(embeds[0], compressed_count(0.25, 16), config.kmeans_iters, 9)
        for emb in embeds[1:]:
            manual = ema_update(manual, match_nearest_unused(manual, emb), 0.1)
        np.testing.assert_array_equal(bank.centers, manual.centers)

    def test_size_independent_of_sample_count(self, tmp_path, rng):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        small = make_manifest(tmp_path / "a", rng, train=2, test_normal=0, test_anomalous=0)
        large = make_manifest(tmp_path / "b", rng, train=7, test_normal=0, test_anomalous=0)
        desc = init_descriptor(8, 4, seed=2)
        config = BankConfig(gamma_c=0.5, seed=3)
        bank_small = build_bank(small, desc, config)
        bank_large = build_bank(large, desc, config)
        assert bank_small.size == bank_large.size == 8
        assert bank_small.centers.nbytes == bank_large.centers.nbytes

    def test_mismatched_grid_shapes_rejected(self, tmp_path, rng):
        from patchbank.featureio import DatasetManifest, ManifestEntry, write_feature_set

        from conftest import random_feature_set

        a = tmp_path / "a.pbt"
        b = tmp_path / "b.pbt"
        write_feature_set(a, random_feature_set(rng, "a", ((3, 4, 4),)))
        write_feature_set(b, random_feature_set(rng, "b", ((3, 2, 2),)))
        manifest = DatasetManifest(
            input_resolution=(8, 8),
            entries=[
                ManifestEntry("a", "train", "normal", a, None),
                ManifestEntry("b", "train", "normal", b, None),
            ],
        )
        desc = init_descriptor(3, 2, seed=0)
        with pytest.raises(ValidationError):
            build_bank(manifest, desc, BankConfig(gamma_c=0.5))

    def test_empty_train_split_rejected(self, tmp_path, rng):
        manifest = make_manifest(tmp_path, rng, train=0, test_normal=1, test_anomalous=0)
        with pytest.raises(ManifestError):
            build_bank(manifest, init_descriptor(8, 4, seed=0), BankConfig())


class TestKnn:
    def test_query_at_center(self, rng):
        centers = rng.standard_normal((5, 3))
        got = knn(MemoryBank(centers=centers), centers[3], 2)
        assert got.indices[0] == 3
        assert got.distances[0] == 0.0

    def test_all_centers_sorted(self, rng):
        centers = rng.standard_normal((6, 2))
        q = rng.standard_normal(2)
        got = knn(MemoryBank(centers=centers), q, 6)
        assert np.all(np.diff(got.distances) >= 0)
        assert sorted(got.indices.tolist()) == list(range(6))

    def test_matches_brute_force_scan(self, rng):
        centers = rng.standard_normal((50, 8))
        bank = MemoryBank(centers=centers)
        for _ in range(100):
            q = rng.standard_normal(8)
            got = knn(bank, q, 5)
            dists = sorted((sq_dist(c, q), j) for j, c in enumerate(centers))
            for rank in range(5):
                assert got.indices[rank] == dists[rank][1]
                assert abs(got.distances[rank] - dists[rank][0]) < 1e-12

    def test_tie_breaks_by_lower_index(self):
        bank = MemoryBank(centers=np.array([[1.0], [-1.0], [1.0]]))
        got = knn(bank, np.array([0.0]), 3)
        np.testing.assert_array_equal(got.indices, [0, 1, 2])

    def test_permutation_relabels_indices(self, rng):
        centers = rng.standard_normal((10, 4))
        q = rng.standard_normal(4)
        base = knn(MemoryBank(centers=centers), q, 4)
        perm = rng.permutation(10)
        permuted = knn(MemoryBank(centers=centers[perm]), q, 4)
        np.testing.assert_array_equal(base.distances, permuted.distances)
        np.testing.assert_array_equal(perm[permuted.indices], base.indices)

    def test_rejects_bad_k(self, rng):
        bank = MemoryBank(centers=rng.standard_normal((4, 2)))
        with pytest.raises(ValidationError):
            knn(bank, np.zeros(2), 5)
        with pytest.raises(ValidationError):
            knn(bank, np.zeros(2), 0)

    def test_neighbor_set_validation(self):
        with pytest.raises(ValidationError):
            NeighborSet(indices=np.array([0, 0]), distances=np.array([0.0, 1.0]))
        with pytest.raises(ValidationError):
            NeighborSet(indices=np.array([0, 1]), distances=np.array([2.0, 1.0]))


class TestNearestCenters:
    def test_blocked_equals_per_query(self, rng):
        centers = rng.standard_normal((7, 4))
        points = rng.standard_normal((23, 4))
        bank = MemoryBank(centers=centers)
        for chunk in (1, 300, 10**9):
            idx, dist = nearest_centers(points, centers, 3, chunk_bytes=chunk)
            for t in range(23):
                single = knn(bank, points[t], 3)
                np.testing.assert_array_equal(idx[t], single.indices)
                assert dist[t].tobytes() == single.distances.tobytes()

    def test_chunk_size_never_changes_bits(self, rng):
        centers = rng.standard_normal((11, 6))
        points = rng.standard_normal((40, 6))
        a = nearest_centers(points, centers, 11, chunk_bytes=1)
        b = nearest_centers(points, centers, 11, chunk_bytes=1 << 30)
        assert a[0].tobytes() == b[0].tobytes()
        assert a[1].tobytes() == b[1].tobytes()


class TestBankCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        bank = MemoryBank(centers=rng.standard_normal((5, 3)).astype(np.float32))
        path = tmp_path / "bank.pbb"
        save_bank(path, bank)
        loaded = load_bank(path)
        np.testing.assert_array_equal(loaded.centers, bank.centers)
        assert loaded.centers.dtype == np.float32

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bank.pbb"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 40)
        with pytest.raises(BadMagicError):
            load_bank(path)

    def test_truncated(self, tmp_path, rng):
        bank = MemoryBank(centers=rng.standard_normal((5, 3)).astype(np.float32))
        path = tmp_path / "bank.pbb"
        save_bank(path, bank)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedPayloadError):
            load_bank(path)

    def test_trailing_bytes(self, tmp_path, rng):
        bank = MemoryBank(centers=rng.standard_normal((2, 2)).astype(np.float32))
        path = tmp_path / "bank.pbb"
        save_bank(path, bank)
        path.write_bytes(path.read_bytes() + b"\x01")
        with pytest.raises(FeatureFormatError):
            load_bank(path)

    def test_non_finite_payload(self, tmp_path):
        bank = MemoryBank(centers=np.ones((2, 2), dtype=np.float32))
        path = tmp_path / "bank.pbb"
        save_bank(path, bank)
        raw = bytearray(path.read_bytes())
        raw[32:36] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(FeatureFormatError):
            load_bank(path)


class TestConfig:
    def test_bank_config_validation(self):
        with pytest.raises(ValidationError):
            BankConfig(gamma_c=0.0)
        with pytest.raises(ValidationError):
            BankConfig(gamma_d=1.2)
        with pytest.raises(ValidationError):
            BankConfig(ema_beta=0.0)
        with pytest.raises(ValidationError):
            BankConfig(kmeans_iters=0)
