import numpy as np
import pytest

from conftest import unit
from hcsc.errors import ConfigurationError, ContractError
from hcsc.evaluation import clustering_agreement
from hcsc.hierarchy import (
    HierarchyOptions,
    TreeBuilder,
    build_hierarchy,
    concentration,
    dump_tree,
    lloyd_kmeans,
    nearest_prototype,
)
from hcsc.numerics import unit_rows


class TestLloydKmeans:
    def test_k_equals_n_gives_zero_inertia(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((7, 3))
        res = lloyd_kmeans(pts, 7, rng=rng)
        assert res.inertia == 0.0
        assert sorted(res.assignments) == list(range(7))

    def test_k_one_gives_arithmetic_mean(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((20, 4))
        res = lloyd_kmeans(pts, 1, rng=rng)
        np.testing.assert_allclose(res.centroids[0], pts.mean(axis=0), atol=1e-9)

    def test_two_separated_blobs_recovered(self):
        rng = np.random.default_rng(2)
        sigma = 0.5
        a = rng.standard_normal((40, 3)) * sigma
        b = rng.standard_normal((40, 3)) * sigma + np.array([10 * sigma, 0, 0])
        pts = np.vstack([a, b])
        labels = np.array([0] * 40 + [1] * 40)
        res = lloyd_kmeans(pts, 2, rng=np.random.default_rng(3))
        # Centroids within half a blob-sigma of the true means.
        true_means = np.array([a.mean(axis=0) * 0 + 0, [10 * sigma, 0, 0]], dtype=float)
        dists = np.linalg.norm(res.centroids[:, None, :] - true_means[None], axis=2)
        matching = np.argmin(dists, axis=1)
        assert sorted(matching) == [0, 1]
        assert np.all(dists[np.arange(2), matching] <= 0.5 * sigma)
        # Assignments match blob membership exactly (up to cluster naming).
        pred = res.assignments
        flip = pred[0] != 0
        np.testing.assert_array_equal(pred ^ flip if flip else pred, labels)

    def test_k_too_large_rejected(self):
        with pytest.raises(ConfigurationError):
            lloyd_kmeans(np.zeros((3, 2)), 4, rng=np.random.default_rng(0))

    def test_inertia_monotone_within_run(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((200, 5))
        res = lloyd_kmeans(pts, 8, rng=rng)
        hist = np.array(res.inertia_history)
        assert np.all(np.diff(hist) <= 1e-9 * np.abs(hist[:-1]))

    def test_assignments_are_nearest_centroid_at_exit(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((60, 3))
        res = lloyd_kmeans(pts, 5, rng=rng)
        d2 = ((pts[:, None, :] - res.centroids[None]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(res.assignments, np.argmin(d2, axis=1))

    def test_deterministic_given_rng(self):
        pts = np.random.default_rng(6).standard_normal((50, 4))
        r1 = lloyd_kmeans(pts, 4, rng=np.random.default_rng(7))
        r2 = lloyd_kmeans(pts, 4, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(r1.assignments, r2.assignments)
        np.testing.assert_array_equal(r1.centroids, r2.centroids)


class TestConcentration:
    def test_two_members_at_unit_distance(self):
        c = np.zeros(3)
        members = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        tau = concentration(members, c, epsilon=10.0)
        assert tau == pytest.approx(1.0 / np.log(12.0), rel=1e-12)

    def test_members_at_centroid_give_zero(self):
        c = unit(np.random.default_rng(0), 4)
        members = np.tile(c, (3, 1))
        assert concentration(members, c, epsilon=10.0) == 0.0

    def test_empty_members_rejected(self):
        with pytest.raises(ContractError):
            concentration(np.zeros((0, 3)), np.zeros(3), epsilon=10.0)

    def test_default_epsilon_is_ten(self):
        assert HierarchyOptions().epsilon == 10.0


class TestBuildHierarchy:
    def test_degenerate_one_prototype_per_sample(self):
        rng = np.random.default_rng(1)
        emb = unit(rng, 6, 5)
        opts = HierarchyOptions(min_cluster_size=1, base_tau=0.2)
        tree = build_hierarchy(emb, (6,), opts, np.random.default_rng(2))
        assert tree.num_levels == 1
        lv = tree.level(1)
        assert lv.size == 6
        # Singleton clusters floor at tau_floor, then rescale to base tau.
        np.testing.assert_allclose(lv.tau, 0.2, atol=1e-12)
        assert sorted(tree.level1_assignment) == list(range(6))

    def test_depth3_recovery(self, bench_dataset):
        emb = unit_rows(bench_dataset.features.astype(np.float64))
        tree = build_hierarchy(
            emb, (24, 6, 2), HierarchyOptions(min_cluster_size=10), np.random.default_rng(0)
        )
        for l in (1, 2, 3):
            _, ami = clustering_agreement(
                tree.assignment_at(l), bench_dataset.labels_at_level(l)
            )
            assert ami >= 0.95, f"level {l} AMI {ami}"

    def test_member_conservation(self, bench_dataset):
        emb = unit_rows(bench_dataset.features.astype(np.float64))
        tree = build_hierarchy(
            emb, (24, 6, 2), HierarchyOptions(min_cluster_size=10), np.random.default_rng(1)
        )
        n = len(bench_dataset)
        for l in (1, 2, 3):
            assert tree.level(l).member_count.sum() == n
            counts = np.bincount(tree.assignment_at(l), minlength=tree.level(l).size)
            np.testing.assert_array_equal(counts, tree.level(l).member_count)

    def test_forest_property(self, bench_dataset):
        emb = unit_rows(bench_dataset.features.astype(np.float64))
        tree = build_hierarchy(
            emb, (24, 6, 2), HierarchyOptions(min_cluster_size=10), np.random.default_rng(2)
        )
        # Every sample's parent chain lands on exactly one top-level root.
        top = tree.assignment_at(3)
        assert top.shape[0] == len(bench_dataset)
        assert set(np.unique(top)) <= set(range(tree.level(3).size))
        # Parent pointers stay in range at every level.
        for l in (1, 2):
            parents = tree.level(l).parent
            assert parents is not None
            assert parents.min() >= 0
            assert parents.max() < tree.level(l + 1).size
        assert tree.level(3).parent is None

    def test_paper_scale_config_accepted(self):
        rng = np.random.default_rng(3)
        emb = unit(rng, 3100, 8)
        opts = HierarchyOptions(
            min_cluster_size=1, kmeans_max_iters=2, kmeans_restarts=1
        )
        tree = build_hierarchy(emb, (3000, 2000, 1000), opts, np.random.default_rng(4))
        assert tree.num_levels == 3
        assert tree.level(1).member_count.sum() == 3100

    def test_non_decreasing_level_sizes_rejected(self):
        emb = unit(np.random.default_rng(0), 30, 4)
        with pytest.raises(ConfigurationError):
            build_hierarchy(emb, (8, 8), HierarchyOptions(min_cluster_size=1))
        with pytest.raises(ConfigurationError):
            build_hierarchy(emb, (4, 6), HierarchyOptions(min_cluster_size=1))

    def test_m1_larger_than_n_rejected(self):
        emb = unit(np.random.default_rng(0), 5, 4)
        with pytest.raises(ConfigurationError):
            build_hierarchy(emb, (6,), HierarchyOptions(min_cluster_size=1))

    def test_tau_postprocessing_invariants(self, bench_dataset):
        emb = unit_rows(bench_dataset.features.astype(np.float64))
        opts = HierarchyOptions(min_cluster_size=10, base_tau=0.2, tau_floor=1e-3)
        tree = build_hierarchy(emb, (24, 6, 2), opts, np.random.default_rng(5))
        for l in (1, 2, 3):
            tau = tree.level(l).tau
            assert np.all(tau >= opts.tau_floor)
            assert tau.mean() == pytest.approx(opts.base_tau, rel=1e-9)

    def test_pruning_reassigns_members(self):
        rng = np.random.default_rng(6)
        # 3 big blobs plus 3 stray points that form their own tiny cluster.
        blobs = np.vstack(
            [unit(rng, 30, 6) * 0.02 + center for center in unit(rng, 3, 6)]
        )
        strays = unit(rng, 3, 6) * 0.02 + unit(rng, 1, 6)
        emb = unit_rows(np.vstack([blobs, strays]))
        opts = HierarchyOptions(min_cluster_size=5, kmeans_restarts=5)
        tree = build_hierarchy(emb, (4,), opts, np.random.default_rng(7))
        assert tree.level(1).member_count.sum() == emb.shape[0]
        assert np.all(tree.level(1).member_count >= opts.min_cluster_size)


class TestNearestPrototype:
    def test_exact_prototype_match(self):
        from conftest import make_tree

        protos = np.eye(4)[:3]
        tree = make_tree([protos], [[0.2, 0.2, 0.2]], [None])
        assert nearest_prototype(protos[1], tree, 1) == 1

    def test_tie_breaks_to_lowest_index(self):
        from conftest import make_tree

        p = unit(np.random.default_rng(0), 4)
        tree = make_tree([np.stack([p, p])], [[0.2, 0.2]], [None])
        assert nearest_prototype(p, tree, 1) == 0

    def test_matches_exhaustive_scan(self):
        from conftest import make_tree

        rng = np.random.default_rng(1)
        protos = unit(rng, 5, 6)
        taus = rng.uniform(0.1, 0.5, size=5)
        tree = make_tree([protos], [taus], [None])
        for _ in range(20):
            z = unit(rng, 6)
            scores = [float(protos[i] @ z / taus[i]) for i in range(5)]
            best = max(range(5), key=lambda i: (scores[i], -i))
            assert nearest_prototype(z, tree, 1) == best


class TestRefresh:
    def test_identical_inputs_identical_trees(self):
        rng = np.random.default_rng(2)
        emb = unit(rng, 40, 6)
        builder = TreeBuilder(
            level_sizes=(5, 2), opts=HierarchyOptions(min_cluster_size=1), seed=9
        )
        t1 = builder.refresh(emb, epoch=4)
        t2 = builder.refresh(emb, epoch=4)
        assert dump_tree(t1) == dump_tree(t2)
        assert t1.epoch_stamp == 4

    def test_refresh_does_not_mutate_previous_tree(self):
        rng = np.random.default_rng(3)
        emb = unit(rng, 40, 6)
        builder = TreeBuilder(
            level_sizes=(5, 2), opts=HierarchyOptions(min_cluster_size=1), seed=9
        )
        t1 = builder.refresh(emb, epoch=0)
        before = dump_tree(t1)
        builder.refresh(unit(rng, 40, 6), epoch=1)
        assert dump_tree(t1) == before
        with pytest.raises(ValueError):
            t1.level(1).prototypes[0, 0] = 5.0

    def test_dump_format(self):
        rng = np.random.default_rng(4)
        emb = unit(rng, 20, 5)
        builder = TreeBuilder(
            level_sizes=(4, 2), opts=HierarchyOptions(min_cluster_size=1), seed=1
        )
        text = dump_tree(builder.refresh(emb, epoch=0))
        lines = text.strip().split("\n")
        assert lines[0].startswith("#")
        assert len(lines) == 1 + 4 + 2
        fields = lines[1].split(" ")
        assert len(fields) == 5
        assert fields[0] == "1"

    def test_refresh_cost_benchmark(self):
        # Informational: the per-epoch rebuild is dominated by the finest
        # k-means pass, so cost should grow roughly with M_1. Timings are
        # printed for the record, not asserted.
        import time

        rng = np.random.default_rng(5)
        emb = unit(rng, 2000, 16)
        opts = HierarchyOptions(min_cluster_size=1, kmeans_restarts=1)
        timings = {}
        for m1 in (25, 50, 100):
            builder = TreeBuilder(level_sizes=(m1, 5), opts=opts, seed=0)
            t0 = time.monotonic()
            builder.refresh(emb, epoch=0)
            timings[m1] = time.monotonic() - t0
        print(
            "\n  refresh cost, N=2000: "
            + ", ".join(f"M1={k}: {v * 1000:.0f}ms" for k, v in timings.items())
        )
