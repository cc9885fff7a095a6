"""Frozen-representation evaluation.

KNN classification with temperature-weighted cosine voting, clustering
agreement (NMI/AMI), a convex linear probe trained by full-batch gradient
descent, selection diagnostics against ground-truth labels, and
prototype-vs-label agreement across hierarchy levels.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics.cluster import (
    adjusted_mutual_info_score,
    normalized_mutual_info_score,
)

from . import rng as rngs
from .errors import ConfigurationError, ContractError
from .hierarchy import PrototypeTree
from .numerics import softmax
from .selection import SelectionReport


@dataclass(frozen=True)
class EvalConfig:
    knn_temperature: float = 0.07
    knn_k_grid: tuple[int, ...] = (10, 20, 100, 200)
    probe_epochs: int = 300
    probe_lr: float = 0.5
    probe_test_fraction: float = 0.25
    diagnostic_sample_rate: float = 1.0

    def __post_init__(self):
        if self.knn_temperature <= 0:
            raise ConfigurationError("knn_temperature must be > 0")
        if not self.knn_k_grid or any(k < 1 for k in self.knn_k_grid):
            raise ConfigurationError("knn_k_grid must be non-empty with k >= 1")
        if self.probe_epochs < 1 or self.probe_lr <= 0:
            raise ConfigurationError("probe epochs/lr must be positive")
        if not (0.0 < self.probe_test_fraction < 1.0):
            raise ConfigurationError("probe_test_fraction must be in (0, 1)")
        if not (0.0 <= self.diagnostic_sample_rate <= 1.0):
            raise ConfigurationError("diagnostic_sample_rate must be in [0, 1]")


@dataclass
class KnnResult:
    accuracy_per_k: dict[int, float]
    best_k: int
    best_accuracy: float
    warnings: list[str] = field(default_factory=list)


def knn_evaluate(
    train_emb: np.ndarray,
    train_labels: np.ndarray,
    test_emb: np.ndarray,
    test_labels: np.ndarray,
    config: EvalConfig,
) -> KnnResult:
    """Weighted-vote KNN over cosine scores, reporting the best k in the grid.

    Neighbor ranking breaks score ties toward the lower train index; class
    ties break toward the lower class index. A k larger than the train set
    is clamped, with a warning recorded in the result.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    n_train = train_emb.shape[0]
    if n_train == 0:
        raise ConfigurationError("empty train set")

    classes = np.unique(train_labels)
    class_of = {c: i for i, c in enumerate(classes)}
    train_class_idx = np.array([class_of[c] for c in train_labels])

    scores = test_emb @ train_emb.T  # (T, N) cosine since rows are unit
    order = np.argsort(-scores, axis=1, kind="stable")
    weights_all = np.exp(scores / config.knn_temperature)

    result = KnnResult(accuracy_per_k={}, best_k=0, best_accuracy=-1.0)
    for k in config.knn_k_grid:
        kk = min(k, n_train)
        if kk < k:
            result.warnings.append(f"k={k} clamped to train size {n_train}")
        top = order[:, :kk]
        votes = np.zeros((test_emb.shape[0], classes.size))
        rows = np.repeat(np.arange(test_emb.shape[0]), kk)
        np.add.at(
            votes,
            (rows, train_class_idx[top].ravel()),
            weights_all[rows, top.ravel()],
        )
        pred = classes[np.argmax(votes, axis=1)]
        acc = float(np.mean(pred == test_labels))
        result.accuracy_per_k[k] = acc
        if acc > result.best_accuracy:
            result.best_accuracy = acc
            result.best_k = k
    return result


def _entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def clustering_agreement(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(NMI, AMI) with arithmetic-mean normalization and natural logs.

    0/0 is defined as 0, so two constant partitions score 0 rather than 1.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"label lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 1:
        raise ContractError("need at least one sample")
    if _entropy(a) == 0.0 and _entropy(b) == 0.0:
        return 0.0, 0.0
    nmi = float(normalized_mutual_info_score(a, b, average_method="arithmetic"))
    ami = float(adjusted_mutual_info_score(a, b, average_method="arithmetic"))
    return nmi, ami


def probe_descent(
    emb: np.ndarray, class_idx: np.ndarray, n_classes: int, epochs: int, lr: float
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Full-batch gradient descent on multinomial logistic regression.

    Returns (W, b, loss history); the objective is convex, so a small
    enough step size decreases the loss monotonically.
    """
    x = np.asarray(emb, dtype=np.float64)
    n, d = x.shape
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), class_idx] = 1.0
    history = []
    for _ in range(epochs):
        logits = x @ w.T + b
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        history.append(float(np.mean(lse - logits[np.arange(n), class_idx])))
        p = softmax(logits, axis=1)
        gw = (p - onehot).T @ x / n
        gb = (p - onehot).sum(axis=0) / n
        w -= lr * gw
        b -= lr * gb
    return w, b, history


def linear_probe(
    emb: np.ndarray, labels: np.ndarray, config: EvalConfig, seed: int
) -> float:
    """Held-out accuracy of a softmax classifier on frozen embeddings."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigurationError("linear probe needs at least two classes")
    class_of = {c: i for i, c in enumerate(classes)}
    class_idx = np.array([class_of[c] for c in labels])

    n = emb.shape[0]
    perm = rngs.substream(seed, rngs.PROBE).permutation(n)
    n_test = max(1, int(round(n * config.probe_test_fraction)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if np.unique(class_idx[train_idx]).size < 2:
        raise ConfigurationError("probe train split collapsed to one class")

    w, b, _ = probe_descent(
        emb[train_idx],
        class_idx[train_idx],
        classes.size,
        config.probe_epochs,
        config.probe_lr,
    )
    pred = np.argmax(emb[test_idx] @ w.T + b, axis=1)
    return float(np.mean(pred == class_idx[test_idx]))


@dataclass
class DiagnosticsRates:
    """Selection quality against ground-truth fine labels.

    A false negative is a candidate sharing the query's fine label. Rates
    are exact counts over the supplied reports; NaN when the denominator
    is empty.
    """

    fn_removal_rate: float
    tn_precision: float
    tn_acceptance: float
    n_false_negatives: int
    n_true_negatives: int
    n_accepted: int


def negative_selection_diagnostics(
    reports: list[tuple[int, SelectionReport]], fine_labels: np.ndarray
) -> DiagnosticsRates:
    """Pool (query_id, report) pairs from one step into quality rates.

    Candidate ids must be sample ids; candidates with id < 0 (unknown
    origin) are ignored.
    """
    fine_labels = np.asarray(fine_labels, dtype=np.int64)
    fn_total = fn_removed = 0
    tn_total = tn_accepted = 0
    accepted_total = 0
    for query_id, report in reports:
        ids = report.candidate_ids
        known = ids >= 0
        if not np.any(known):
            continue
        ids = ids[known]
        accepted = report.accepted[known]
        is_fn = fine_labels[ids] == fine_labels[query_id]
        fn_total += int(is_fn.sum())
        fn_removed += int((is_fn & ~accepted).sum())
        tn_total += int((~is_fn).sum())
        tn_accepted += int((~is_fn & accepted).sum())
        accepted_total += int(accepted.sum())
    return DiagnosticsRates(
        fn_removal_rate=fn_removed / fn_total if fn_total else math.nan,
        tn_precision=tn_accepted / accepted_total if accepted_total else math.nan,
        tn_acceptance=tn_accepted / tn_total if tn_total else math.nan,
        n_false_negatives=fn_total,
        n_true_negatives=tn_total,
        n_accepted=accepted_total,
    )


def prototype_label_ami(tree: PrototypeTree, labels: np.ndarray) -> np.ndarray:
    """AMI between tree assignments and each ground-truth label level.

    Returns an (L, label_levels) array: entry [l-1, m-1] compares the
    tree's level-l sample assignment with label level m.
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] == tree.level1_assignment.shape[0]:
        labels_by_level = labels.T
    else:
        labels_by_level = labels
    if labels_by_level.shape[1] != tree.level1_assignment.shape[0]:
        raise ContractError("labels do not match the tree's sample count")
    out = np.zeros((tree.num_levels, labels_by_level.shape[0]))
    for l in range(1, tree.num_levels + 1):
        assign = tree.assignment_at(l)
        for m in range(labels_by_level.shape[0]):
            _, ami = clustering_agreement(assign, labels_by_level[m])
            out[l - 1, m] = ami
    return out
