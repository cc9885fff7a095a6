import math

import numpy as np
import pytest

from conftest import unit
from hcsc.errors import ConfigurationError, ContractError
from hcsc.evaluation import (
    EvalConfig,
    clustering_agreement,
    knn_evaluate,
    linear_probe,
    negative_selection_diagnostics,
    probe_descent,
    prototype_label_ami,
)
from hcsc.hierarchy import HierarchyLevel, PrototypeTree
from hcsc.selection import SelectionReport
from oracles import reference_knn


class TestKnn:
    def test_exact_duplicate_wins_at_k1(self):
        rng = np.random.default_rng(0)
        train = unit(rng, 10, 6)
        labels = np.arange(10)
        cfg = EvalConfig(knn_k_grid=(1,))
        res = knn_evaluate(train, labels, train[3][None, :], np.array([3]), cfg)
        assert res.accuracy_per_k[1] == 1.0

    def test_default_temperature(self):
        assert EvalConfig().knn_temperature == 0.07
        assert EvalConfig().knn_k_grid == (10, 20, 100, 200)

    def test_matches_direct_reference_on_random_instances(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            train = unit(rng, 20, 5)
            train_labels = rng.integers(0, 4, size=20)
            test = unit(rng, 8, 5)
            test_labels = rng.integers(0, 4, size=8)
            for k in (1, 3, 7):
                cfg = EvalConfig(knn_k_grid=(k,))
                res = knn_evaluate(train, train_labels, test, test_labels, cfg)
                preds = reference_knn(train, train_labels, test, k, cfg.knn_temperature)
                assert res.accuracy_per_k[k] == pytest.approx(
                    float(np.mean(preds == test_labels))
                )

    def test_oversized_k_clamped_with_warning(self):
        rng = np.random.default_rng(2)
        train = unit(rng, 5, 4)
        labels = np.zeros(5, dtype=int)
        res = knn_evaluate(train, labels, train, labels, EvalConfig(knn_k_grid=(10,)))
        assert res.accuracy_per_k[10] == 1.0
        assert any("clamped" in w for w in res.warnings)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        train = unit(rng, 30, 6)
        test = unit(rng, 10, 6)
        train_labels = rng.integers(0, 3, 30)
        test_labels = rng.integers(0, 3, 10)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        cfg = EvalConfig(knn_k_grid=(5,))
        a = knn_evaluate(train, train_labels, test, test_labels, cfg)
        b = knn_evaluate(train @ q.T, train_labels, test @ q.T, test_labels, cfg)
        assert a.accuracy_per_k == pytest.approx(b.accuracy_per_k)

    def test_best_is_max_over_grid(self):
        rng = np.random.default_rng(4)
        train = unit(rng, 40, 5)
        labels = rng.integers(0, 2, 40)
        res = knn_evaluate(train, labels, train, labels, EvalConfig(knn_k_grid=(1, 5, 9)))
        assert res.best_accuracy == max(res.accuracy_per_k.values())
        assert res.accuracy_per_k[res.best_k] == res.best_accuracy


class TestClusteringAgreement:
    def test_identical_nontrivial_partitions(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        nmi, ami = clustering_agreement(labels, labels + 5)
        assert nmi == pytest.approx(1.0)
        assert ami == pytest.approx(1.0)

    def test_constant_partition_scores_zero(self):
        nmi, ami = clustering_agreement(np.zeros(10), np.arange(10) % 3)
        assert nmi == 0.0
        assert abs(ami) < 1e-12

    def test_two_constant_partitions_score_zero(self):
        nmi, ami = clustering_agreement(np.zeros(5), np.ones(5))
        assert (nmi, ami) == (0.0, 0.0)

    def test_independent_partitions_near_zero(self):
        rng = np.random.default_rng(5)
        amis = []
        for _ in range(5):
            a = rng.integers(0, 2, size=1000)
            b = rng.integers(0, 2, size=1000)
            amis.append(clustering_agreement(a, b)[1])
        assert all(abs(v) <= 0.05 for v in amis)

    def test_symmetry_and_label_permutation_invariance(self):
        rng = np.random.default_rng(6)
        a = rng.integers(0, 4, size=200)
        b = rng.integers(0, 3, size=200)
        assert clustering_agreement(a, b) == pytest.approx(clustering_agreement(b, a))
        remap = np.array([2, 0, 3, 1])
        assert clustering_agreement(remap[a], b) == pytest.approx(
            clustering_agreement(a, b)
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            clustering_agreement(np.zeros(3), np.zeros(4))


class TestLinearProbe:
    def test_linearly_separable_two_classes(self):
        rng = np.random.default_rng(7)
        n = 60
        emb = np.vstack(
            [
                rng.standard_normal((n, 4)) * 0.1 + np.array([3, 0, 0, 0.0]),
                rng.standard_normal((n, 4)) * 0.1 - np.array([3, 0, 0, 0.0]),
            ]
        )
        labels = np.array([0] * n + [1] * n)
        acc = linear_probe(emb, labels, EvalConfig(probe_epochs=200, probe_lr=0.5), seed=0)
        assert acc == 1.0

    def test_shuffled_labels_score_near_chance(self):
        rng = np.random.default_rng(8)
        emb = rng.standard_normal((400, 6))
        labels = rng.integers(0, 4, size=400)  # labels independent of emb
        acc = linear_probe(emb, labels, EvalConfig(probe_epochs=100, probe_lr=0.2), seed=1)
        # Chance is 0.25; binomial 3 sigma on the ~100-point test split.
        assert abs(acc - 0.25) <= 3.0 * math.sqrt(0.25 * 0.75 / 100.0) + 0.05

    def test_loss_decreases_monotonically_with_small_step(self):
        rng = np.random.default_rng(9)
        emb = rng.standard_normal((50, 4))
        labels = rng.integers(0, 3, size=50)
        _, _, history = probe_descent(emb, labels, 3, epochs=100, lr=0.05)
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            linear_probe(np.zeros((10, 3)), np.zeros(10), EvalConfig(), seed=0)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(10)
        emb = rng.standard_normal((80, 5))
        labels = rng.integers(0, 2, size=80)
        cfg = EvalConfig(probe_epochs=50, probe_lr=0.3)
        assert linear_probe(emb, labels, cfg, seed=3) == linear_probe(emb, labels, cfg, seed=3)


def _report(ids, accepted, level=1):
    ids = np.asarray(ids, dtype=np.int64)
    return SelectionReport(
        level=level,
        candidate_ids=ids,
        probabilities=np.full(ids.size, 0.5),
        accepted=np.asarray(accepted, dtype=bool),
    )


class TestDiagnostics:
    def test_all_false_negatives_rejected_gives_removal_one(self):
        labels = np.array([7, 7, 7, 7])
        rep = _report([1, 2, 3], [False, False, False])
        rates = negative_selection_diagnostics([(0, rep)], labels)
        assert rates.fn_removal_rate == 1.0
        assert math.isnan(rates.tn_acceptance)

    def test_no_shared_labels_gives_full_precision(self):
        labels = np.array([0, 1, 2, 3])
        rep = _report([1, 2, 3], [True, True, False])
        rates = negative_selection_diagnostics([(0, rep)], labels)
        assert rates.tn_precision == 1.0
        assert rates.tn_acceptance == pytest.approx(2.0 / 3.0)
        assert math.isnan(rates.fn_removal_rate)

    def test_rates_are_exact_counts(self):
        labels = np.array([5, 5, 1, 5, 2])
        rep = _report([1, 2, 3, 4], [True, True, False, False])
        rates = negative_selection_diagnostics([(0, rep)], labels)
        # False negatives: ids 1 and 3 (label 5). Removed: id 3 only.
        assert rates.fn_removal_rate == pytest.approx(0.5)
        # True negatives: ids 2 and 4; accepted: id 2.
        assert rates.tn_acceptance == pytest.approx(0.5)
        assert rates.tn_precision == pytest.approx(0.5)

    def test_unknown_ids_ignored(self):
        labels = np.array([0, 0])
        rep = _report([-1, 1], [True, True])
        rates = negative_selection_diagnostics([(0, rep)], labels)
        assert rates.n_false_negatives == 1
        assert rates.n_true_negatives == 0


class TestPrototypeLabelAmi:
    def test_tree_built_from_labels_scores_one_on_diagonal(self):
        rng = np.random.default_rng(11)
        n = 60
        fine = np.repeat(np.arange(6), 10)
        coarse = fine // 3
        protos1 = unit(rng, 6, 4)
        protos2 = unit(rng, 2, 4)
        tree = PrototypeTree(
            levels=[
                HierarchyLevel(
                    prototypes=protos1,
                    tau=np.full(6, 0.2),
                    member_count=np.full(6, 10),
                    parent=np.array([0, 0, 0, 1, 1, 1]),
                ),
                HierarchyLevel(
                    prototypes=protos2,
                    tau=np.full(2, 0.2),
                    member_count=np.array([30, 30]),
                    parent=None,
                ),
            ],
            level1_assignment=fine.copy(),
        )
        labels = np.stack([fine, coarse], axis=1)
        ami = prototype_label_ami(tree, labels)
        assert ami.shape == (2, 2)
        assert ami[0, 0] == pytest.approx(1.0)
        assert ami[1, 1] == pytest.approx(1.0)

    def test_random_assignment_scores_near_zero(self):
        rng = np.random.default_rng(12)
        n = 400
        labels = np.stack([rng.integers(0, 4, n), rng.integers(0, 2, n)], axis=1)
        tree = PrototypeTree(
            levels=[
                HierarchyLevel(
                    prototypes=unit(rng, 4, 4),
                    tau=np.full(4, 0.2),
                    member_count=np.full(4, 100),
                    parent=None,
                )
            ],
            level1_assignment=rng.integers(0, 4, n),
        )
        ami = prototype_label_ami(tree, labels)
        assert np.all(np.abs(ami) <= 0.05)
