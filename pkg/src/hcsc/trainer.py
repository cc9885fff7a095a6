"""Training loop: epoch-level prototype refresh, warmup, SGD with momentum
and a cosine schedule, EMA and queue maintenance, checkpoints, metrics.

All persistent state (encoder parameters, momentum copy, queue, optimizer
velocity) is kept in float32 so checkpoints restore it bit-exactly; the
math inside a step runs in float64 and results are rounded back to
float32. Random streams are re-derived from (seed, epoch, step, ...) keys,
so a resumed run consumes exactly the draws the uninterrupted run would.
"""

import math
import os
from dataclasses import dataclass, fields

import numpy as np

from . import rng as rngs
from ._binio import (
    ByteReader,
    decode_kv_block,
    encode_kv_block,
    pack_u32,
    write_bytes_atomic,
)
from .data import AugmentationPolicy, Dataset, augment
from .encoder import (
    EncoderConfig,
    EncoderParams,
    MomentumState,
    NegativeQueue,
    ema_update,
    encoder_backward,
    encoder_forward,
    init_params,
)
from .errors import ConfigurationError, FormatError, NumericError
from .evaluation import (
    EvalConfig,
    knn_evaluate,
    negative_selection_diagnostics,
    prototype_label_ami,
)
from .hierarchy import HierarchyOptions, PrototypeTree, TreeBuilder, nearest_prototype
from .losses import LossWeights, hcsc_loss, icsc_loss, info_nce, pcsc_loss
from .selection import (
    DIAGNOSTICS_CSV_HEADER,
    SelectionReport,
    instance_probability_tables,
    report_csv_rows,
    select_instance_negatives,
    select_proto_negatives,
)

CKPT_MAGIC = b"HCSC"
CKPT_VERSION = 1

WARMUP_MODES = ("icsc", "plain_infonce")

_TUPLE_INT_FIELDS = frozenset({"hidden_sizes", "level_sizes", "knn_k_grid"})


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 60
    warmup_epochs: int = 6
    batch_size: int = 64
    lr_init: float = 0.06
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    queue_capacity: int = 512
    ema_m: float = 0.999
    hidden_sizes: tuple[int, ...] = (64,)
    embed_dim: int = 32
    level_sizes: tuple[int, ...] = (24, 6, 2)
    min_cluster_size: int = 10
    epsilon: float = 10.0
    base_tau: float = 0.2
    tau_floor: float = 1e-3
    seed: int = 0
    use_hierarchy: bool = True
    instance_loss: bool = True
    proto_loss: bool = True
    instance_selection: bool = True
    proto_selection: bool = True
    warmup_mode: str = "icsc"
    noise_sigma: float = 0.1
    drop_prob: float = 0.0
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    eval_fraction: float = 0.2
    knn_k_grid: tuple[int, ...] = (10, 20, 100, 200)
    knn_temperature: float = 0.07
    checkpoint_every: int = 0
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-7
    diagnostics: bool = True
    diagnostics_rate: float = 0.0
    threads: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ConfigurationError("warmup_epochs must be in 0..epochs")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.lr_init <= 0 or self.sgd_momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("optimizer rates must be positive")
        if not (0.0 <= self.ema_m <= 1.0):
            raise ConfigurationError("ema_m must be in [0, 1]")
        if self.queue_capacity < 1:
            raise ConfigurationError("queue_capacity must be >= 1")
        if self.warmup_mode not in WARMUP_MODES:
            raise ConfigurationError(f"warmup_mode must be one of {WARMUP_MODES}")
        if not (0.0 < self.eval_fraction < 1.0):
            raise ConfigurationError("eval_fraction must be in (0, 1)")
        if self.seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        if self.threads < 0:
            raise ConfigurationError("threads must be >= 0")
        if not (0.0 <= self.diagnostics_rate <= 1.0):
            raise ConfigurationError("diagnostics_rate must be in [0, 1]")
        # Component toggles must be self-consistent (validated by LossWeights).
        self.loss_weights
        needs_tree = self.proto_loss or self.instance_selection or self.proto_selection
        if needs_tree and not self.use_hierarchy:
            raise ConfigurationError(
                "prototype loss and pair selection require use_hierarchy"
            )
        if self.use_hierarchy and not self.level_sizes:
            raise ConfigurationError("use_hierarchy requires level_sizes")
        if self.warmup_epochs > 0 and not self.instance_loss:
            raise ConfigurationError("warmup trains the instance loss; enable it or set warmup_epochs=0")

    @property
    def augmentation(self) -> AugmentationPolicy:
        return AugmentationPolicy(
            noise_sigma=self.noise_sigma,
            drop_prob=self.drop_prob,
            scale_range=(self.scale_lo, self.scale_hi),
        )

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            tau=self.base_tau,
            instance_loss=self.instance_loss,
            proto_loss=self.proto_loss,
            instance_selection=self.instance_selection,
            proto_selection=self.proto_selection,
        )

    @property
    def hierarchy_options(self) -> HierarchyOptions:
        return HierarchyOptions(
            min_cluster_size=self.min_cluster_size,
            epsilon=self.epsilon,
            base_tau=self.base_tau,
            tau_floor=self.tau_floor,
            kmeans_max_iters=self.kmeans_max_iters,
            kmeans_tol=self.kmeans_tol,
        )

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(layer_sizes=(input_dim, *self.hidden_sizes, self.embed_dim))

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                out[f.name] = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                out[f.name] = "1" if value else "0"
            elif isinstance(value, float):
                out[f.name] = repr(value)
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainingConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            default = f.default
            if f.name in _TUPLE_INT_FIELDS:
                kwargs[f.name] = tuple(int(v) for v in raw.split(",")) if raw else ()
            elif isinstance(default, bool):
                kwargs[f.name] = raw == "1"
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def lr_schedule(epoch_fraction: float, lr_init: float) -> float:
    """Cosine annealing from lr_init down to zero."""
    if not (0.0 <= epoch_fraction <= 1.0):
        raise ConfigurationError(f"epoch_fraction must be in [0, 1], got {epoch_fraction}")
    return lr_init * (1.0 + math.cos(math.pi * epoch_fraction)) / 2.0


@dataclass
class TrainState:
    epoch: int  # next epoch to run
    step: int  # completed global steps
    params: EncoderParams
    momentum: MomentumState
    queue: NegativeQueue
    velocity: EncoderParams  # optimizer momentum buffers, same shapes
    config: TrainingConfig
    tree: PrototypeTree | None = None


def encode_all(params: EncoderParams, features: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Embed a feature matrix in chunks; returns float64 unit rows."""
    parts = []
    for start in range(0, features.shape[0], chunk):
        z, _ = encoder_forward(params, features[start : start + chunk])
        parts.append(z)
    return np.vstack(parts)


def init_state(config: TrainingConfig, dataset: Dataset) -> TrainState:
    """Fresh state: seeded params, EMA copy, queue filled with momentum keys."""
    enc_cfg = config.encoder_config(dataset.dim)
    params = init_params(enc_cfg, rngs.substream(config.seed, rngs.INIT), dtype=np.float32)
    momentum = MomentumState(params=params.copy(), m=config.ema_m)
    velocity = EncoderParams(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )
    queue = NegativeQueue(config.queue_capacity, config.embed_dim)
    qrng = rngs.substream(config.seed, rngs.QUEUE_INIT)
    idx = qrng.integers(0, len(dataset), size=config.queue_capacity)
    keys = encode_all(momentum.params, dataset.features[idx])
    queue.push(keys.astype(np.float32), idx.astype(np.int64))
    return TrainState(
        epoch=0,
        step=0,
        params=params,
        momentum=momentum,
        queue=queue,
        velocity=velocity,
        config=config,
    )


# --- checkpoint serialization -------------------------------------------

def save_checkpoint(path: str, state: TrainState):
    """Write magic, version, config echo, float32 tensors, then queue ids.

    Tensor order: online params, momentum params, queue contents,
    optimizer velocity; weights and biases interleave in layer order.
    """
    snap = state.queue.snapshot()
    input_dim = state.params.weights[0].shape[1]
    echo = state.config.to_kv()
    echo["ckpt.epoch"] = str(state.epoch)
    echo["ckpt.step"] = str(state.step)
    echo["ckpt.queue_size"] = str(len(snap))
    echo["ckpt.layer_sizes"] = ",".join(
        str(s) for s in (input_dim, *(w.shape[0] for w in state.params.weights))
    )
    tensors = (
        state.params.tensors()
        + state.momentum.params.tensors()
        + [snap.embeddings]
        + state.velocity.tensors()
    )
    payload = [CKPT_MAGIC, pack_u32(CKPT_VERSION), encode_kv_block(echo)]
    for t in tensors:
        payload.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    payload.append(np.ascontiguousarray(snap.ids, dtype="<i8").tobytes())
    write_bytes_atomic(path, b"".join(payload))


def _read_tensor(reader: ByteReader, shape: tuple[int, ...], what: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = reader.take(count * 4, what)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def load_checkpoint(path: str) -> TrainState:
    with open(path, "rb") as fh:
        reader = ByteReader(fh.read())
    reader.expect_magic(CKPT_MAGIC)
    version = reader.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    echo = decode_kv_block(reader)
    try:
        config = TrainingConfig.from_kv(echo)
        epoch = int(echo["ckpt.epoch"])
        step = int(echo["ckpt.step"])
        queue_size = int(echo["ckpt.queue_size"])
        layer_sizes = tuple(int(s) for s in echo["ckpt.layer_sizes"].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid checkpoint echo block: {exc}") from exc

    def read_params(tag: str) -> EncoderParams:
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(_read_tensor(reader, (fan_out, fan_in), f"{tag} weight"))
            biases.append(_read_tensor(reader, (fan_out,), f"{tag} bias"))
        return EncoderParams(weights=weights, biases=biases)

    params = read_params("online")
    momentum_params = read_params("momentum")
    queue_emb = _read_tensor(reader, (queue_size, layer_sizes[-1]), "queue")
    velocity = read_params("velocity")
    ids_raw = reader.take(queue_size * 8, "queue ids")
    queue_ids = np.frombuffer(ids_raw, dtype="<i8").copy()
    reader.done()

    queue = NegativeQueue(config.queue_capacity, layer_sizes[-1])
    if queue_size:
        queue.push(queue_emb, queue_ids)
    return TrainState(
        epoch=epoch,
        step=step,
        params=params,
        momentum=MomentumState(params=momentum_params, m=config.ema_m),
        queue=queue,
        velocity=velocity,
        config=config,
    )


# --- metrics -------------------------------------------------------------

@dataclass
class StepMetrics:
    epoch: int
    step: int
    lr: float
    loss_total: float
    loss_icsc: float  # nan when not computed
    loss_pcsc: float
    sel_p_mean: list[float]  # per level, nan when no selection ran
    accepted_mean: list[float]
    fn_removal_rate: float
    tn_precision: float
    tn_acceptance: float


@dataclass
class EpochMetrics:
    epoch: int
    ami_per_level: list[float]
    knn_accuracy: float
    knn_best_k: int


class MetricsLog:
    """Accumulates rows and renders a deterministic CSV."""

    def __init__(self, num_levels: int):
        self.num_levels = num_levels
        self.rows: list[dict[str, str]] = []

    @property
    def columns(self) -> list[str]:
        ls = range(1, self.num_levels + 1)
        return (
            ["kind", "epoch", "step", "lr", "loss_total", "loss_icsc", "loss_pcsc"]
            + [f"sel_p_mean_l{l}" for l in ls]
            + [f"accepted_mean_l{l}" for l in ls]
            + ["fn_removal_rate", "tn_precision", "tn_acceptance"]
            + [f"ami_l{l}" for l in ls]
            + ["knn_accuracy", "knn_best_k"]
        )

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return "" if math.isnan(value) else repr(value)
        return str(value)

    def _pad_levels(self, values: list[float]) -> list[float]:
        padded = list(values) + [math.nan] * (self.num_levels - len(values))
        return padded[: self.num_levels]

    def add_step(self, m: StepMetrics):
        row = {
            "kind": "step",
            "epoch": str(m.epoch),
            "step": str(m.step),
            "lr": self._fmt(m.lr),
            "loss_total": self._fmt(m.loss_total),
            "loss_icsc": self._fmt(m.loss_icsc),
            "loss_pcsc": self._fmt(m.loss_pcsc),
            "fn_removal_rate": self._fmt(m.fn_removal_rate),
            "tn_precision": self._fmt(m.tn_precision),
            "tn_acceptance": self._fmt(m.tn_acceptance),
        }
        for l, v in enumerate(self._pad_levels(m.sel_p_mean), start=1):
            row[f"sel_p_mean_l{l}"] = self._fmt(v)
        for l, v in enumerate(self._pad_levels(m.accepted_mean), start=1):
            row[f"accepted_mean_l{l}"] = self._fmt(v)
        self.rows.append(row)

    def add_epoch(self, m: EpochMetrics):
        row = {
            "kind": "epoch",
            "epoch": str(m.epoch),
            "knn_accuracy": self._fmt(m.knn_accuracy),
            "knn_best_k": str(m.knn_best_k),
        }
        for l, v in enumerate(self._pad_levels(m.ami_per_level), start=1):
            row[f"ami_l{l}"] = self._fmt(v)
        self.rows.append(row)

    def to_csv(self) -> str:
        cols = self.columns
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(row.get(c, "") for c in cols))
        return "\n".join(lines) + "\n"


# --- the step -------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray  # (B, D) raw
    ids: np.ndarray  # (B,) int64 sample ids
    fine_labels: np.ndarray | None = None  # full per-sample array, diagnostics only


def _accept_all_instance_reports(snapshot, num_levels: int) -> list[SelectionReport]:
    q = len(snapshot)
    return [
        SelectionReport(
            level=l,
            candidate_ids=snapshot.ids.astype(np.int64, copy=True),
            probabilities=np.ones(q),
            accepted=np.ones(q, dtype=bool),
        )
        for l in range(1, num_levels + 1)
    ]


def _accept_all_proto_reports(tree: PrototypeTree, z: np.ndarray) -> list[SelectionReport]:
    reports = []
    for level in range(1, tree.num_levels + 1):
        pos = nearest_prototype(z, tree, level)
        cands = np.array(
            [i for i in range(tree.level(level).size) if i != pos], dtype=np.int64
        )
        reports.append(
            SelectionReport(
                level=level,
                candidate_ids=cands,
                probabilities=np.ones(cands.size),
                accepted=np.ones(cands.size, dtype=bool),
            )
        )
    return reports


def _report_summary(reports: list[SelectionReport]) -> str:
    parts = []
    for rep in reports:
        acc = int(rep.accepted.sum())
        parts.append(
            f"level {rep.level}: {acc}/{rep.accepted.size} accepted, "
            f"p range [{rep.probabilities.min(initial=1.0):.3g}, "
            f"{rep.probabilities.max(initial=0.0):.3g}]"
        )
    return "; ".join(parts) if parts else "no selection reports"


def train_step(
    state: TrainState,
    batch: Batch,
    lr: float,
    diag_sink: list[str] | None = None,
) -> StepMetrics:
    """One optimization step; mutates state in place.

    Sequence: augment both views, embed (online encoder for the query
    view, momentum encoder for the key view), select negatives, compute
    the configured loss, backpropagate, SGD-with-momentum update with
    weight decay, EMA update, push keys into the queue.

    When diag_sink is given and diagnostics_rate > 0, a per-step keyed
    subsample of queries has its instance selection reports appended to
    the sink as diagnostics CSV rows.
    """
    config = state.config
    weights = config.loss_weights
    epoch, step = state.epoch, state.step
    b = batch.features.shape[0]
    policy = config.augmentation
    dump_mask = None
    if diag_sink is not None and config.diagnostics_rate > 0.0:
        diag_rng = rngs.substream(config.seed, rngs.DIAG, epoch, step)
        dump_mask = diag_rng.random(b) < config.diagnostics_rate

    snapshot = state.queue.snapshot()
    aug_rng = rngs.substream(config.seed, rngs.AUGMENT, epoch, step)
    view1 = np.empty((b, batch.features.shape[1]))
    view2 = np.empty_like(view1)
    for i in range(b):
        view1[i] = augment(batch.features[i], policy, aug_rng)
        view2[i] = augment(batch.features[i], policy, aug_rng)

    z_batch, cache = encoder_forward(state.params, view1)
    keys, _ = encoder_forward(state.momentum.params, view2)

    in_warmup = epoch < config.warmup_epochs
    tree = state.tree
    plain_warmup = in_warmup and config.warmup_mode == "plain_infonce"
    use_tree_losses = config.use_hierarchy and not plain_warmup
    run_proto = use_tree_losses and weights.proto_loss and not in_warmup

    tables = None
    if use_tree_losses and weights.instance_loss and weights.instance_selection:
        tables = instance_probability_tables(snapshot, tree)

    num_levels = tree.num_levels if (tree is not None and use_tree_losses) else 0
    grad_rows = np.zeros_like(z_batch)
    total_value = 0.0
    icsc_sum, pcsc_sum = 0.0, 0.0
    icsc_seen = pcsc_seen = False
    sel_p_sums = np.zeros(num_levels)
    sel_p_counts = np.zeros(num_levels)
    accepted_sums = np.zeros(num_levels)
    diag_reports: list[tuple[int, SelectionReport]] = []

    snap_emb64 = np.asarray(snapshot.embeddings, dtype=np.float64)

    for q in range(b):
        z = z_batch[q]
        z_pos = keys[q]
        icsc_out = pcsc_out = None
        query_reports: list[SelectionReport] = []

        if not use_tree_losses:
            icsc_out = info_nce(z, z_pos, snap_emb64, config.base_tau)
            query_loss = icsc_out
        else:
            if weights.instance_loss:
                if weights.instance_selection:
                    rng_i = rngs.substream(
                        config.seed, rngs.SELECT_INSTANCE, epoch, step, q
                    )
                    inst_reports = select_instance_negatives(
                        z, snapshot, tree, rng_i, tables
                    )
                else:
                    inst_reports = _accept_all_instance_reports(snapshot, num_levels)
                icsc_out = icsc_loss(z, z_pos, inst_reports, snapshot, config.base_tau)
                query_reports.extend(inst_reports)
                for l, rep in enumerate(inst_reports):
                    sel_p_sums[l] += rep.probabilities.sum()
                    sel_p_counts[l] += rep.probabilities.size
                    accepted_sums[l] += rep.accepted.sum()
                if config.diagnostics and batch.fine_labels is not None:
                    diag_reports.extend(
                        (int(batch.ids[q]), rep) for rep in inst_reports
                    )
                if dump_mask is not None and dump_mask[q]:
                    for rep in inst_reports:
                        diag_sink.extend(
                            report_csv_rows(step, int(batch.ids[q]), rep)
                        )
            if run_proto:
                if weights.proto_selection:
                    rng_p = rngs.substream(
                        config.seed, rngs.SELECT_PROTO, epoch, step, q
                    )
                    proto_reports = [
                        select_proto_negatives(z, tree, level, rng_p)
                        for level in range(1, num_levels + 1)
                    ]
                else:
                    proto_reports = _accept_all_proto_reports(tree, z)
                pcsc_out = pcsc_loss(z, tree, proto_reports)
                query_reports.extend(proto_reports)
            if in_warmup:
                query_loss = icsc_out
            else:
                query_loss = hcsc_loss(icsc_out, pcsc_out, weights)

        if not np.isfinite(query_loss.value) or not np.all(np.isfinite(query_loss.grad_z)):
            raise NumericError(
                f"non-finite loss at epoch {epoch} step {step} query {q} "
                f"(sample id {int(batch.ids[q])}); {_report_summary(query_reports)}"
            )
        total_value += query_loss.value
        grad_rows[q] = query_loss.grad_z
        if icsc_out is not None:
            icsc_sum += icsc_out.value
            icsc_seen = True
        if pcsc_out is not None:
            pcsc_sum += pcsc_out.value
            pcsc_seen = True

    grad_rows /= b
    grads = encoder_backward(cache, grad_rows)

    # SGD with momentum; weight decay folded into the gradient so lr=0
    # leaves parameters untouched.
    lam, mu = config.weight_decay, config.sgd_momentum
    for theta, vel, g in zip(
        state.params.tensors(), state.velocity.tensors(), grads.tensors()
    ):
        theta64 = np.asarray(theta, dtype=np.float64)
        v64 = mu * np.asarray(vel, dtype=np.float64) + (g + lam * theta64)
        vel[...] = v64.astype(np.float32)
        theta[...] = (theta64 - lr * v64).astype(np.float32)

    state.momentum = ema_update(state.momentum, state.params)
    state.queue.push(keys.astype(np.float32), batch.ids)
    state.step += 1

    if diag_reports:
        diag = negative_selection_diagnostics(diag_reports, batch.fine_labels)
    else:
        diag = None

    sel_means = [
        float(sel_p_sums[l] / sel_p_counts[l]) if sel_p_counts[l] else math.nan
        for l in range(num_levels)
    ]
    acc_means = [
        float(accepted_sums[l] / b) if sel_p_counts[l] else math.nan
        for l in range(num_levels)
    ]

    return StepMetrics(
        epoch=epoch,
        step=state.step - 1,
        lr=lr,
        loss_total=total_value / b,
        loss_icsc=icsc_sum / b if icsc_seen else math.nan,
        loss_pcsc=pcsc_sum / b if pcsc_seen else math.nan,
        sel_p_mean=sel_means,
        accepted_mean=acc_means,
        fn_removal_rate=diag.fn_removal_rate if diag else math.nan,
        tn_precision=diag.tn_precision if diag else math.nan,
        tn_acceptance=diag.tn_acceptance if diag else math.nan,
    )


def evaluation_split(seed: int, n: int, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train_idx, held_out_idx) split for in-training metrics."""
    perm = rngs.substream(seed, rngs.SPLIT).permutation(n)
    n_eval = max(1, int(round(n * eval_fraction)))
    return perm[n_eval:], perm[:n_eval]


def kv_to_text(kv: dict[str, str]) -> str:
    return "\n".join(f"{k}={kv[k]}" for k in sorted(kv)) + "\n"


def run_training(
    config: TrainingConfig,
    dataset: Dataset,
    out_dir: str,
    resume_from: str | None = None,
) -> tuple[str, str]:
    """Train for config.epochs epochs; returns (final checkpoint, metrics csv).

    Each epoch rebuilds the prototype tree from momentum-encoder embeddings
    of the full dataset, then iterates shuffled batches. Checkpoints are
    written atomically at the configured cadence plus a final one; metrics
    land in one CSV with a row per step and one per epoch.
    """
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config != config:
            raise ConfigurationError(
                "resume config differs from the checkpoint; a resumed run "
                "continues its original configuration"
            )
    else:
        state = init_state(config, dataset)

    write_bytes_atomic(
        os.path.join(out_dir, "config.txt"), kv_to_text(config.to_kv()).encode("utf-8")
    )

    log = MetricsLog(num_levels=len(config.level_sizes))
    fine = dataset.labels_at_level(1)
    train_idx, held_idx = evaluation_split(config.seed, len(dataset), config.eval_fraction)
    builder = TreeBuilder(
        level_sizes=config.level_sizes,
        opts=config.hierarchy_options,
        seed=config.seed,
    )
    eval_cfg = EvalConfig(
        knn_temperature=config.knn_temperature, knn_k_grid=config.knn_k_grid
    )

    n = len(dataset)
    diag_rows: list[str] | None = [] if config.diagnostics_rate > 0.0 else None
    for epoch in range(state.epoch, config.epochs):
        state.epoch = epoch
        if config.use_hierarchy:
            emb_momentum = encode_all(state.momentum.params, dataset.features)
            state.tree = builder.refresh(emb_momentum, epoch)
        lr = lr_schedule(epoch / config.epochs, config.lr_init)
        order = rngs.substream(config.seed, rngs.SHUFFLE, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = Batch(
                features=dataset.features[idx],
                ids=idx.astype(np.int64),
                fine_labels=fine if config.diagnostics else None,
            )
            log.add_step(train_step(state, batch, lr, diag_sink=diag_rows))

        emb_online = encode_all(state.params, dataset.features)
        knn = knn_evaluate(
            emb_online[train_idx],
            fine[train_idx],
            emb_online[held_idx],
            fine[held_idx],
            eval_cfg,
        )
        if state.tree is not None:
            ami_matrix = prototype_label_ami(state.tree, dataset.labels)
            ami = [
                float(ami_matrix[l - 1, min(l, dataset.depth) - 1])
                for l in range(1, state.tree.num_levels + 1)
            ]
        else:
            ami = []
        log.add_epoch(
            EpochMetrics(
                epoch=epoch,
                ami_per_level=ami,
                knn_accuracy=knn.best_accuracy,
                knn_best_k=knn.best_k,
            )
        )
        state.epoch = epoch + 1
        if config.checkpoint_every > 0 and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"epoch_{epoch + 1:04d}.ckpt"), state)

    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(final_path, state)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_bytes_atomic(metrics_path, log.to_csv().encode("utf-8"))
    if diag_rows is not None:
        text = "\n".join([DIAGNOSTICS_CSV_HEADER, *diag_rows]) + "\n"
        write_bytes_atomic(
            os.path.join(out_dir, "diagnostics.csv"), text.encode("utf-8")
        )
    return final_path, metrics_path
