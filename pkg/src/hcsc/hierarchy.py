"""Hierarchical prototypes: bottom-up K-means over embeddings.

Level 1 clusters the embeddings themselves; every higher level clusters
the centroids of the level below, and each prototype keeps the index of
the centroid it was assigned to as its parent. The result is a forest
whose roots are the top-level prototypes.

Each prototype carries a concentration temperature derived from the
spread of its transitive image members; temperatures are floored and then
rescaled per level so their mean matches the base instance temperature.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .errors import ConfigurationError, ContractError
from .numerics import unit_rows


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,) int64, nearest centroid at convergence
    inertia: float  # sum of squared distances
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)


def _pairwise_sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(c * c, axis=1)[None, :]
        - 2.0 * (x @ c.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: per seed, try a few D^2-weighted candidates and
    keep the one that shrinks the potential most."""
    n = x.shape[0]
    trials = 2 + int(np.log(k)) if k > 1 else 1
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            cands = rng.choice(n, size=trials, p=d2 / total)
            best_idx, best_d2 = None, None
            for idx in cands:
                nd2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
                if best_d2 is None or nd2.sum() < best_d2.sum():
                    best_idx, best_d2 = int(idx), nd2
            chosen[j] = best_idx
            d2 = best_d2
        else:
            # All remaining points coincide with chosen centroids; fall back
            # to a uniform pick among the untaken ones.
            idx = int(rng.choice(np.flatnonzero(~taken)))
            chosen[j] = idx
            d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
        taken[chosen[j]] = True
    return x[chosen].copy()


def lloyd_kmeans(
    points: np.ndarray,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-7,
    rng: np.random.Generator | None = None,
    restarts: int = 1,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Terminates when the inertia improvement drops below tol or after
    max_iters assignment passes. Empty clusters are reseeded at the point
    currently farthest from its own centroid, handled in ascending cluster
    order so the repair is deterministic. With restarts > 1 the run with
    the lowest final inertia wins; all seeding draws come from the single
    provided rng, so the result is still a pure function of it.
    """
    if restarts < 1:
        raise ConfigurationError("restarts must be >= 1")
    best = None
    for _ in range(restarts):
        result = _lloyd_once(points, k, max_iters, tol, rng)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def _lloyd_once(
    points: np.ndarray,
    k: int,
    max_iters: int,
    tol: float,
    rng: np.random.Generator | None,
) -> KMeansResult:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError("points must be a 2-D array")
    n = x.shape[0]
    if not (1 <= k <= n):
        raise ConfigurationError(f"k={k} must satisfy 1 <= k <= {n}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("points must be finite")
    if rng is None:
        rng = np.random.default_rng()

    centroids = _kmeanspp_init(x, k, rng)
    assignments = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    prev_inertia = np.inf
    inertia = np.inf
    it = 0
    while it < max_iters:
        d2 = _pairwise_sqdist(x, centroids)
        assignments = np.argmin(d2, axis=1)
        # Exact residuals against the assigned centroid; the expansion above
        # is only trusted for the argmin.
        point_d2 = np.sum((x - centroids[assignments]) ** 2, axis=1)
        inertia = float(point_d2.sum())
        history.append(inertia)
        it += 1
        if prev_inertia - inertia < tol:
            break
        prev_inertia = inertia

        counts = np.bincount(assignments, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not np.all(nonempty):
            repair_d2 = point_d2.copy()
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(repair_d2))
                centroids[j] = x[far]
                repair_d2[far] = -1.0

    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        inertia=inertia,
        n_iter=it,
        inertia_history=history,
    )


@dataclass(frozen=True)
class HierarchyOptions:
    min_cluster_size: int = 10
    epsilon: float = 10.0
    base_tau: float = 0.2
    tau_floor: float = 1e-3
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-7
    kmeans_restarts: int = 5

    def __post_init__(self):
        if self.min_cluster_size < 1:
            raise ConfigurationError("min_cluster_size must be >= 1")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.base_tau <= 0 or self.tau_floor <= 0:
            raise ConfigurationError("base_tau and tau_floor must be > 0")
        if self.kmeans_restarts < 1:
            raise ConfigurationError("kmeans_restarts must be >= 1")


@dataclass
class HierarchyLevel:
    prototypes: np.ndarray  # (M_l, delta) unit rows
    tau: np.ndarray  # (M_l,) post-processed temperatures
    member_count: np.ndarray  # (M_l,) transitive image members
    parent: np.ndarray | None  # (M_l,) index into the level above, None at top

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]


@dataclass
class PrototypeTree:
    levels: list[HierarchyLevel]  # index 0 = level 1 (finest)
    level1_assignment: np.ndarray  # (N,) int64
    epoch_stamp: int = 0

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, l: int) -> HierarchyLevel:
        if not (1 <= l <= self.num_levels):
            raise ContractError(f"level {l} outside 1..{self.num_levels}")
        return self.levels[l - 1]

    def assignment_at(self, l: int) -> np.ndarray:
        """Per-sample prototype index at a level via parent composition."""
        assign = self.level1_assignment
        for lower in range(1, l):
            assign = self.levels[lower - 1].parent[assign]
        return assign

    def _freeze(self):
        for lv in self.levels:
            lv.prototypes.setflags(write=False)
            lv.tau.setflags(write=False)
            lv.member_count.setflags(write=False)
            if lv.parent is not None:
                lv.parent.setflags(write=False)
        self.level1_assignment.setflags(write=False)


def concentration(member_embeddings: np.ndarray, centroid: np.ndarray, epsilon: float) -> float:
    """Mean member distance scaled by log cluster size: the raw temperature.

    Uses the natural log; returns the value before flooring or rescaling.
    """
    members = np.atleast_2d(np.asarray(member_embeddings, dtype=np.float64))
    if members.shape[0] == 0:
        raise ContractError("concentration needs at least one member")
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    c = np.asarray(centroid, dtype=np.float64)
    dists = np.linalg.norm(members - c, axis=1)
    m = members.shape[0]
    return float(dists.sum() / (m * np.log(m + epsilon)))


def _postprocess_tau(raw: np.ndarray, opts: HierarchyOptions) -> np.ndarray:
    tau = np.maximum(raw, opts.tau_floor)
    tau = tau * (opts.base_tau / tau.mean())
    return np.maximum(tau, opts.tau_floor)


def _reassign_pruned(
    points: np.ndarray, assignment: np.ndarray, centroids: np.ndarray, keep: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Drop pruned centroids; reroute their points to the nearest survivor.

    Returns (compacted centroids, remapped assignment).
    """
    survivors = np.flatnonzero(keep)
    remap = -np.ones(centroids.shape[0], dtype=np.int64)
    remap[survivors] = np.arange(survivors.size)
    new_assign = remap[assignment]
    lost = new_assign < 0
    if np.any(lost):
        d2 = _pairwise_sqdist(points[lost], centroids[survivors])
        new_assign[lost] = np.argmin(d2, axis=1)
    return centroids[survivors], new_assign


def build_hierarchy(
    embeddings: np.ndarray,
    level_sizes: tuple[int, ...],
    opts: HierarchyOptions | None = None,
    rng: np.random.Generator | None = None,
) -> PrototypeTree:
    """Cluster embeddings bottom-up into a prototype forest.

    level_sizes lists the requested prototype counts from the finest level
    up; sizes must be strictly decreasing. Prototypes with fewer than
    min_cluster_size transitive members are pruned level by level, their
    members rerouted to the nearest surviving prototype of the same level.
    If pruning leaves fewer centroids than the next level requests, the
    request is clamped.
    """
    if opts is None:
        opts = HierarchyOptions()
    if rng is None:
        rng = np.random.default_rng()
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise ConfigurationError("embeddings must be (N, delta)")
    n = z.shape[0]
    num_levels = len(level_sizes)
    if num_levels < 1:
        raise ConfigurationError("need at least one level size")
    if level_sizes[0] > n:
        raise ConfigurationError(f"M_1={level_sizes[0]} exceeds N={n}")
    for a, b in zip(level_sizes, level_sizes[1:]):
        if b >= a:
            raise ConfigurationError(f"level sizes must strictly decrease, got {level_sizes}")

    levels: list[HierarchyLevel] = []
    # Working state for the level being built.
    km1 = lloyd_kmeans(
        z, level_sizes[0], opts.kmeans_max_iters, opts.kmeans_tol, rng,
        restarts=opts.kmeans_restarts,
    )
    centroids = unit_rows(km1.centroids)
    assignment = km1.assignments.copy()  # sample -> level-1 prototype
    counts = np.bincount(assignment, minlength=centroids.shape[0])
    keep = counts >= opts.min_cluster_size
    if keep.any() and not keep.all():
        centroids, assignment = _reassign_pruned(z, assignment, centroids, keep)
        counts = np.bincount(assignment, minlength=centroids.shape[0])
    level1_assignment = assignment
    levels.append(
        HierarchyLevel(prototypes=centroids, tau=np.array([]), member_count=counts, parent=None)
    )

    for l in range(2, num_levels + 1):
        children = levels[-1]
        k = min(level_sizes[l - 1], children.size)
        km = lloyd_kmeans(
            children.prototypes, k, opts.kmeans_max_iters, opts.kmeans_tol, rng,
            restarts=opts.kmeans_restarts,
        )
        parent_of_child = km.assignments.copy()
        protos = unit_rows(km.centroids)
        counts = np.zeros(protos.shape[0], dtype=np.int64)
        np.add.at(counts, parent_of_child, children.member_count)
        keep = counts >= opts.min_cluster_size
        if keep.any() and not keep.all():
            protos, parent_of_child = _reassign_pruned(
                children.prototypes, parent_of_child, protos, keep
            )
            counts = np.zeros(protos.shape[0], dtype=np.int64)
            np.add.at(counts, parent_of_child, children.member_count)
        children.parent = parent_of_child
        levels.append(
            HierarchyLevel(prototypes=protos, tau=np.array([]), member_count=counts, parent=None)
        )

    tree = PrototypeTree(levels=levels, level1_assignment=level1_assignment)

    # Temperatures from transitive image members, then floor and per-level
    # rescale so mean(tau) equals the base instance temperature.
    for l in range(1, num_levels + 1):
        lv = tree.levels[l - 1]
        assign_l = tree.assignment_at(l)
        raw = np.empty(lv.size, dtype=np.float64)
        for j in range(lv.size):
            members = z[assign_l == j]
            if members.shape[0] == 0:
                raw[j] = 0.0  # pruning should prevent this; floored anyway
            else:
                raw[j] = concentration(members, lv.prototypes[j], opts.epsilon)
        lv.tau = _postprocess_tau(raw, opts)

    tree._freeze()
    return tree


def nearest_prototype(z: np.ndarray, tree: PrototypeTree, level: int) -> int:
    """Index of the prototype with the highest temperature-scaled score.

    Ties break toward the lowest index.
    """
    lv = tree.level(level)
    scores = (lv.prototypes @ np.asarray(z, dtype=np.float64)) / lv.tau
    return int(np.argmax(scores))


@dataclass(frozen=True)
class TreeBuilder:
    """Epoch-keyed tree refresh with a fixed recipe."""

    level_sizes: tuple[int, ...]
    opts: HierarchyOptions
    seed: int

    def refresh(self, embeddings: np.ndarray, epoch: int) -> PrototypeTree:
        """Build a fresh tree for an epoch; never mutates previous trees."""
        tree = build_hierarchy(
            embeddings,
            self.level_sizes,
            self.opts,
            rngs.substream(self.seed, rngs.TREE, epoch),
        )
        tree.epoch_stamp = epoch
        return tree


def dump_tree(tree: PrototypeTree) -> str:
    """One line per prototype: level index parent member_count tau."""
    lines = ["# level index parent member_count tau"]
    for l in range(1, tree.num_levels + 1):
        lv = tree.level(l)
        for j in range(lv.size):
            parent = int(lv.parent[j]) if lv.parent is not None else -1
            lines.append(f"{l} {j} {parent} {int(lv.member_count[j])} {lv.tau[j]:.10g}")
    return "\n".join(lines) + "\n"
