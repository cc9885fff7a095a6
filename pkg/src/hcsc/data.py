"""Synthetic datasets with known multi-level label hierarchies.

The generator builds a tree of Gaussian cluster centers top-down: root
centers lie uniformly on a sphere, each child center is its parent plus a
Gaussian offset with a level-specific scale, and samples are leaf centers
plus isotropic noise. Labels record, per sample and per level, the index
of the ancestor node at that level; level 1 is the finest (leaf) level.

Raw features are stored as float32 and are intentionally not normalized;
projecting onto the unit sphere is the encoder's job.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from ._binio import (
    ByteReader,
    decode_kv_block,
    encode_kv_block,
    pack_u32,
    write_bytes_atomic,
)
from .errors import ConfigurationError, ContractError, FormatError

MAGIC = b"HCSD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class AugmentationPolicy:
    """Vector-space augmentation: x' = mask * (s*x + noise).

    noise ~ N(0, noise_sigma^2 I), s ~ U(scale_range), mask coordinates are
    i.i.d. Bernoulli(1 - drop_prob).
    """

    noise_sigma: float = 0.0
    drop_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (0.0 <= self.drop_prob < 1.0):
            raise ConfigurationError(f"drop_prob must be in [0, 1), got {self.drop_prob}")
        a, b = self.scale_range
        if not (0.0 < a <= b):
            raise ConfigurationError(f"scale_range must satisfy 0 < a <= b, got {self.scale_range}")


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape and noise parameters of the hierarchical mixture generator.

    branching is listed from the coarsest split down to the leaves, so the
    number of level-l label values is prod(branching[: depth - l + 1]).
    child_scales[i] is the offset std used when expanding tree depth i+1
    into depth i+2 (one entry per non-root level).
    """

    depth: int
    branching: tuple[int, ...]
    samples_per_leaf: int
    dim: int
    radius: float = 10.0
    child_scales: tuple[float, ...] = ()
    leaf_noise: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if len(self.branching) != self.depth:
            raise ConfigurationError(
                f"branching must have {self.depth} entries, got {len(self.branching)}"
            )
        if any(b < 2 for b in self.branching):
            raise ConfigurationError(f"all branching factors must be >= 2, got {self.branching}")
        if self.samples_per_leaf < 1:
            raise ConfigurationError(f"samples_per_leaf must be >= 1, got {self.samples_per_leaf}")
        if self.dim < 1:
            raise ConfigurationError(f"dim must be >= 1, got {self.dim}")
        if self.radius <= 0:
            raise ConfigurationError(f"radius must be > 0, got {self.radius}")
        if len(self.child_scales) != self.depth - 1:
            raise ConfigurationError(
                f"child_scales must have {self.depth - 1} entries, got {len(self.child_scales)}"
            )
        if any(s < 0 for s in self.child_scales):
            raise ConfigurationError(f"child_scales must be >= 0, got {self.child_scales}")
        if self.leaf_noise < 0:
            raise ConfigurationError(f"leaf_noise must be >= 0, got {self.leaf_noise}")

    @property
    def n_leaves(self) -> int:
        return int(np.prod(self.branching))

    @property
    def n_samples(self) -> int:
        return self.samples_per_leaf * self.n_leaves

    def level_size(self, level: int) -> int:
        """Number of distinct label values at a level (1 = finest)."""
        return int(np.prod(self.branching[: self.depth - level + 1]))


@dataclass(frozen=True)
class Sample:
    id: int
    features: np.ndarray  # (dim,) float32
    labels: tuple[int, ...]  # one per level, finest first


@dataclass
class Dataset:
    """Column-oriented sample store with its generator metadata."""

    features: np.ndarray  # (N, dim) float32
    labels: np.ndarray  # (N, depth) uint32, column l-1 = level l
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def depth(self) -> int:
        return self.labels.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(
            id=i,
            features=self.features[i],
            labels=tuple(int(v) for v in self.labels[i]),
        )

    def labels_at_level(self, level: int) -> np.ndarray:
        """Labels for one hierarchy level, 1 = finest."""
        if not (1 <= level <= self.depth):
            raise ConfigurationError(f"label level {level} outside 1..{self.depth}")
        return self.labels[:, level - 1].astype(np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.shape == other.labels.shape
            and self.labels.tobytes() == other.labels.tobytes()
            and self.meta == other.meta
        )


def _spec_meta(spec: GeneratorSpec, seed: int) -> dict[str, str]:
    return {
        "branching": ",".join(str(b) for b in spec.branching),
        "child_scales": ",".join(repr(float(s)) for s in spec.child_scales),
        "depth": str(spec.depth),
        "dim": str(spec.dim),
        "generator": "hierarchical_gaussian_mixture",
        "leaf_noise": repr(float(spec.leaf_noise)),
        "radius": repr(float(spec.radius)),
        "samples_per_leaf": str(spec.samples_per_leaf),
        "seed": str(seed),
    }


def spec_from_meta(meta: dict[str, str]) -> GeneratorSpec:
    """Reconstruct the generator spec recorded in a dataset's meta block."""
    try:
        branching = tuple(int(b) for b in meta["branching"].split(","))
        scales = meta["child_scales"]
        child_scales = tuple(float(s) for s in scales.split(",")) if scales else ()
        return GeneratorSpec(
            depth=int(meta["depth"]),
            branching=branching,
            samples_per_leaf=int(meta["samples_per_leaf"]),
            dim=int(meta["dim"]),
            radius=float(meta["radius"]),
            child_scales=child_scales,
            leaf_noise=float(meta["leaf_noise"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"dataset meta block is not a valid generator spec: {exc}") from exc


def generate_hierarchical_mixture(spec: GeneratorSpec, seed: int) -> Dataset:
    """Draw a dataset from the hierarchical Gaussian mixture.

    Deterministic for a fixed (spec, seed). Returns
    samples_per_leaf * prod(branching) samples in leaf order.
    """
    stream = rngs.substream(seed, rngs.DATAGEN)

    # Root centers: uniform directions on the sphere of the given radius.
    n_roots = spec.branching[0]
    g = stream.standard_normal((n_roots, spec.dim))
    centers = spec.radius * (g / np.linalg.norm(g, axis=1, keepdims=True))

    # Expand one tree depth at a time; children inherit their parent center
    # plus a Gaussian offset whose scale shrinks toward the leaves.
    for i in range(1, spec.depth):
        b = spec.branching[i]
        parents = np.repeat(centers, b, axis=0)
        offsets = stream.standard_normal(parents.shape) * spec.child_scales[i - 1]
        centers = parents + offsets

    leaf_centers = centers  # (n_leaves, dim)
    n = spec.n_samples
    per_sample_centers = np.repeat(leaf_centers, spec.samples_per_leaf, axis=0)
    noise = stream.standard_normal((n, spec.dim)) * spec.leaf_noise
    features = (per_sample_centers + noise).astype(np.float32)

    leaf_of_sample = np.repeat(np.arange(spec.n_leaves, dtype=np.int64), spec.samples_per_leaf)
    labels = np.empty((n, spec.depth), dtype=np.uint32)
    for level in range(1, spec.depth + 1):
        # Ancestor index at this level: strip the trailing mixed-radix digits.
        stride = int(np.prod(spec.branching[spec.depth - level + 1 :]))
        labels[:, level - 1] = leaf_of_sample // stride

    return Dataset(features=features, labels=labels, meta=_spec_meta(spec, seed))


def augment(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply mask * (s*x + noise); consumes the rng in a fixed order."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractError("augment input must be finite")
    a, b = policy.scale_range
    s = rng.uniform(a, b)
    noise = rng.standard_normal(x.shape) * policy.noise_sigma
    mask = (rng.random(x.shape) >= policy.drop_prob).astype(np.float64)
    return mask * (s * x + noise)


def save_dataset(ds: Dataset, path: str):
    """Serialize to the bit-exact dataset format and write atomically."""
    n, dim = ds.features.shape
    depth = ds.labels.shape[1]
    branching = tuple(int(b) for b in ds.meta.get("branching", "").split(",")) if ds.meta.get("branching") else ()
    if len(branching) != depth:
        raise ConfigurationError("dataset meta must declare branching matching label depth")

    row_dtype = np.dtype(
        [("id", "<u8"), ("labels", "<u4", (depth,)), ("features", "<f4", (dim,))]
    )
    rows = np.empty(n, dtype=row_dtype)
    rows["id"] = np.arange(n, dtype=np.uint64)
    rows["labels"] = ds.labels
    rows["features"] = ds.features

    blob = b"".join(
        [
            MAGIC,
            pack_u32(FORMAT_VERSION, n, dim, depth),
            pack_u32(*branching) if branching else b"",
            rows.tobytes(),
            encode_kv_block(ds.meta),
        ]
    )
    write_bytes_atomic(path, blob)


def load_dataset(path: str) -> Dataset:
    """Read a dataset file, validating structure and label ranges."""
    with open(path, "rb") as fh:
        reader = ByteReader(fh.read())

    reader.expect_magic(MAGIC)
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    n = reader.u32("sample count")
    dim = reader.u32("feature dim")
    depth = reader.u32("label depth")
    if depth < 1 or dim < 1:
        raise FormatError("dataset must have dim >= 1 and depth >= 1", 8)
    branching = tuple(reader.u32(f"branching[{i}]") for i in range(depth))

    row_dtype = np.dtype(
        [("id", "<u8"), ("labels", "<u4", (depth,)), ("features", "<f4", (dim,))]
    )
    rows_offset = reader.offset
    raw = reader.take(n * row_dtype.itemsize, "sample rows")
    rows = np.frombuffer(raw, dtype=row_dtype)
    meta = decode_kv_block(reader)
    reader.done()

    ids = rows["id"]
    if not np.array_equal(ids, np.arange(n, dtype=np.uint64)):
        raise FormatError("sample ids are not contiguous 0..N-1", rows_offset)
    labels = np.ascontiguousarray(rows["labels"], dtype=np.uint32).reshape(n, depth)
    for level in range(1, depth + 1):
        size = int(np.prod(branching[: depth - level + 1]))
        if n and labels[:, level - 1].max(initial=0) >= size:
            raise FormatError(
                f"level-{level} label outside declared range 0..{size - 1}", rows_offset
            )
    features = np.ascontiguousarray(rows["features"], dtype=np.float32).reshape(n, dim)
    if not np.all(np.isfinite(features)):
        raise FormatError("non-finite feature values", rows_offset)

    return Dataset(features=features, labels=labels, meta=meta)
