import numpy as np
import pytest

from hcsc.data import GeneratorSpec, generate_hierarchical_mixture
from hcsc.hierarchy import HierarchyLevel, HierarchyOptions, PrototypeTree, build_hierarchy
from hcsc.numerics import unit_rows


def unit(rng: np.random.Generator, *shape) -> np.ndarray:
    return unit_rows(rng.standard_normal(shape))


def fd_grad(f, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a vector."""
    g = np.zeros_like(z, dtype=np.float64)
    for i in range(z.size):
        zp, zm = z.astype(np.float64).copy(), z.astype(np.float64).copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def rel_match_fraction(analytic: np.ndarray, numeric: np.ndarray, rel_tol: float, floor: float = 1e-8):
    """Fraction of coordinates with |g| > floor matching within rel_tol."""
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    mask = np.abs(analytic) > floor
    if not mask.any():
        return 1.0
    rel = np.abs(analytic - numeric)[mask] / np.abs(analytic)[mask]
    return float(np.mean(rel <= rel_tol))


def make_tree(protos_per_level, taus_per_level, parents_per_level, level1_assignment=None):
    """Assemble a PrototypeTree directly from arrays (for controlled tests)."""
    levels = []
    for protos, taus, parents in zip(protos_per_level, taus_per_level, parents_per_level):
        protos = np.asarray(protos, dtype=np.float64)
        levels.append(
            HierarchyLevel(
                prototypes=protos,
                tau=np.asarray(taus, dtype=np.float64),
                member_count=np.ones(protos.shape[0], dtype=np.int64),
                parent=None if parents is None else np.asarray(parents, dtype=np.int64),
            )
        )
    if level1_assignment is None:
        level1_assignment = np.zeros(1, dtype=np.int64)
    return PrototypeTree(levels=levels, level1_assignment=np.asarray(level1_assignment))


def random_tiny_tree(rng: np.random.Generator, n=8, delta=4, level_sizes=(4, 2)):
    """A small real tree built from random unit embeddings."""
    emb = unit(rng, n, delta)
    opts = HierarchyOptions(min_cluster_size=1, kmeans_restarts=2)
    tree = build_hierarchy(emb, level_sizes, opts, rng)
    return emb, tree


@pytest.fixture(scope="session")
def bench_spec() -> GeneratorSpec:
    """Well-separated depth-3 data used across the suite."""
    return GeneratorSpec(
        depth=3,
        branching=(2, 3, 4),
        samples_per_leaf=50,
        dim=32,
        radius=10.0,
        child_scales=(1.0, 0.35),
        leaf_noise=0.04,
    )


@pytest.fixture(scope="session")
def bench_dataset(bench_spec):
    return generate_hierarchical_mixture(bench_spec, seed=0)
