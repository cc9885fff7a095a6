"""Small MLP encoder with explicit forward/backward passes.

Hidden layers use tanh; the output layer is linear followed by L2
normalization onto the unit sphere. The backward pass includes the
normalization layer's tangent-space projection, so parameter gradients are
exact for any loss expressed in terms of the normalized embedding.

A momentum copy of the parameters (exponential moving average) produces
the stable "key" embeddings, and a FIFO queue stores recent keys as
negative candidates.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError


@dataclass(frozen=True)
class EncoderConfig:
    """layer_sizes = (input dim, hidden..., output dim)."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ConfigurationError("encoder needs at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ConfigurationError(f"layer sizes must be >= 1, got {self.layer_sizes}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def embed_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class EncoderParams:
    """Per-layer weight matrices (out, in) and bias vectors (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def tensors(self) -> list[np.ndarray]:
        """Weights and biases interleaved in layer order (checkpoint order)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def shapes_match(self, other: "EncoderParams") -> bool:
        return len(self.weights) == len(other.weights) and all(
            a.shape == b.shape
            for a, b in zip(self.tensors(), other.tensors())
        )


@dataclass
class MomentumState:
    """EMA copy of the online encoder; m is the retention coefficient."""

    params: EncoderParams
    m: float

    def __post_init__(self):
        if not (0.0 <= self.m <= 1.0):
            raise ConfigurationError(f"EMA coefficient must be in [0, 1], got {self.m}")


def init_params(
    config: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> EncoderParams:
    """Kaiming-style scaled Gaussian weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append((rng.standard_normal((fan_out, fan_in)) * std).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return EncoderParams(weights=weights, biases=biases)


@dataclass
class ForwardCache:
    """Everything backward needs: layer inputs, pre-normalization output."""

    inputs: list[np.ndarray]  # activation entering each layer, float64
    hidden: list[np.ndarray]  # tanh outputs per hidden layer
    pre_norm: np.ndarray  # (B, delta) output before normalization
    norms: np.ndarray  # (B, 1)
    embeddings: np.ndarray  # (B, delta) unit rows
    weights: list[np.ndarray]  # float64 views of the weights used


def encoder_forward(
    params: EncoderParams, batch: np.ndarray
) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch of raw vectors; returns unit-norm rows and a cache."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[1] != params.weights[0].shape[1]:
        raise ContractError(
            f"batch dim {x.shape[1]} does not match layer 0 input {params.weights[0].shape[1]}"
        )
    weights64 = [np.asarray(w, dtype=np.float64) for w in params.weights]
    biases64 = [np.asarray(b, dtype=np.float64) for b in params.biases]

    n_layers = len(weights64)
    inputs, hidden = [], []
    a = x
    for i, (w, b) in enumerate(zip(weights64, biases64)):
        inputs.append(a)
        with np.errstate(invalid="ignore", over="ignore"):
            u = a @ w.T + b
        if not np.all(np.isfinite(u)):
            raise NumericError(f"non-finite activations in layer {i}")
        if i < n_layers - 1:
            a = np.tanh(u)
            hidden.append(a)
        else:
            a = u
    pre_norm = a
    norms = np.linalg.norm(pre_norm, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm output cannot be projected to the unit sphere")
    z = pre_norm / norms
    cache = ForwardCache(
        inputs=inputs,
        hidden=hidden,
        pre_norm=pre_norm,
        norms=norms,
        embeddings=z,
        weights=weights64,
    )
    return z, cache


@dataclass
class EncoderGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def encoder_backward(cache: ForwardCache, grad_wrt_embeddings: np.ndarray) -> EncoderGrads:
    """Exact parameter gradients, summed over the batch.

    grad_wrt_embeddings holds d(loss)/d(embedding) per row, taken in the
    ambient space; the normalization layer's projection
    (I - z z^T) / ||pre_norm|| is applied here.
    """
    g = np.atleast_2d(np.asarray(grad_wrt_embeddings, dtype=np.float64))
    if g.shape != cache.embeddings.shape:
        raise ContractError(
            f"gradient shape {g.shape} does not match embeddings {cache.embeddings.shape}"
        )
    z = cache.embeddings
    radial = np.sum(g * z, axis=1, keepdims=True)
    da = (g - radial * z) / cache.norms

    n_layers = len(cache.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            # tanh layer: d/du tanh(u) = 1 - tanh(u)^2
            h = cache.hidden[i]
            du = da * (1.0 - h * h)
        else:
            du = da
        grad_w[i] = du.T @ cache.inputs[i]
        grad_b[i] = du.sum(axis=0)
        if i > 0:
            da = du @ cache.weights[i]
    return EncoderGrads(weights=grad_w, biases=grad_b)


def ema_update(momentum: MomentumState, online: EncoderParams) -> MomentumState:
    """Elementwise convex combination m*theta_k + (1-m)*theta_q."""
    if not momentum.params.shapes_match(online):
        raise ContractError("momentum/online parameter shapes differ")
    m = momentum.m
    new = EncoderParams(
        weights=[m * wk + (1.0 - m) * wq for wk, wq in zip(momentum.params.weights, online.weights)],
        biases=[m * bk + (1.0 - m) * bq for bk, bq in zip(momentum.params.biases, online.biases)],
    )
    return MomentumState(params=new, m=m)


@dataclass(frozen=True)
class QueueSnapshot:
    """Immutable view of queue contents in FIFO (oldest-first) order."""

    embeddings: np.ndarray  # (size, delta) float32, read-only
    ids: np.ndarray  # (size,) int64 sample ids, -1 if unknown

    def __len__(self) -> int:
        return self.embeddings.shape[0]


class NegativeQueue:
    """Bounded FIFO of momentum-encoder embeddings (with source ids)."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigurationError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim), dtype=np.float32)
        self._ids = np.full(capacity, -1, dtype=np.int64)
        self._size = 0
        self._cursor = 0  # next write position once full

    def __len__(self) -> int:
        return self._size

    def push(self, keys: np.ndarray, ids: np.ndarray | None = None):
        """Append keys in order, evicting the oldest entries when full."""
        keys = np.atleast_2d(np.asarray(keys))
        if keys.shape[1] != self.dim:
            raise ContractError(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        norms = np.linalg.norm(keys.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ContractError("queue keys must be unit-norm")
        if ids is None:
            ids = np.full(keys.shape[0], -1, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[0] != keys.shape[0]:
            raise ContractError("ids length must match keys")

        if keys.shape[0] > self.capacity:
            keys = keys[-self.capacity :]
            ids = ids[-self.capacity :]
        for key, sid in zip(keys.astype(np.float32), ids):
            self._buf[self._cursor] = key
            self._ids[self._cursor] = sid
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def snapshot(self) -> QueueSnapshot:
        if self._size < self.capacity:
            emb = self._buf[: self._size].copy()
            ids = self._ids[: self._size].copy()
        else:
            order = np.r_[self._cursor : self.capacity, 0 : self._cursor]
            emb = self._buf[order].copy()
            ids = self._ids[order].copy()
        emb.setflags(write=False)
        ids.setflags(write=False)
        return QueueSnapshot(embeddings=emb, ids=ids)
