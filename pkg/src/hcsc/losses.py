"""Contrastive losses with analytic gradients w.r.t. the query embedding.

Every loss treats the positive and the negatives as constants; the
gradient is taken only in the query's ambient coordinates, before the
encoder's normalization projection. Log-sum-exp terms are computed with
max subtraction.
"""

from dataclasses import dataclass

import numpy as np

from .encoder import QueueSnapshot
from .errors import ConfigurationError, ContractError
from .hierarchy import PrototypeTree, nearest_prototype
from .selection import SelectionReport


@dataclass
class LossOutput:
    value: float
    grad_z: np.ndarray  # (delta,)

    def __add__(self, other: "LossOutput") -> "LossOutput":
        return LossOutput(self.value + other.value, self.grad_z + other.grad_z)

    def scaled(self, factor: float) -> "LossOutput":
        return LossOutput(self.value * factor, self.grad_z * factor)


@dataclass(frozen=True)
class LossWeights:
    """Instance temperature plus the component toggles.

    instance_selection/proto_selection require their corresponding loss
    terms; selection without a loss to feed is a configuration error.
    """

    tau: float = 0.2
    instance_loss: bool = True
    proto_loss: bool = True
    instance_selection: bool = True
    proto_selection: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.instance_selection and not self.instance_loss:
            raise ConfigurationError("instance selection requires the instance loss")
        if self.proto_selection and not self.proto_loss:
            raise ConfigurationError("prototype selection requires the prototype loss")
        if not (self.instance_loss or self.proto_loss):
            raise ConfigurationError("at least one loss term must be enabled")


def _nce(z: np.ndarray, cands: np.ndarray, inv_tau: np.ndarray) -> LossOutput:
    """Shared softmax cross-entropy core; row 0 of cands is the positive."""
    logits = (cands @ z) * inv_tau
    m = logits.max()
    e = np.exp(logits - m)
    lse = m + np.log(e.sum())
    probs = e / e.sum()
    value = float(lse - logits[0])
    grad = (probs * inv_tau) @ cands - inv_tau[0] * cands[0]
    return LossOutput(value=value, grad_z=grad)


def info_nce(
    z: np.ndarray, z_pos: np.ndarray, negatives: np.ndarray, tau: float
) -> LossOutput:
    """Softmax contrast of one positive against a set of negatives."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    z_pos = np.asarray(z_pos, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, z.shape[0])
    cands = np.vstack([z_pos[None, :], negatives])
    inv_tau = np.full(cands.shape[0], 1.0 / tau)
    return _nce(z, cands, inv_tau)


def proto_nce(
    z: np.ndarray,
    pos: tuple[np.ndarray, float],
    negs: list[tuple[np.ndarray, float]],
) -> LossOutput:
    """Instance-vs-prototype contrast with per-prototype temperatures."""
    z = np.asarray(z, dtype=np.float64)
    c_pos, tau_pos = pos
    taus = [tau_pos] + [t for _, t in negs]
    if any(t <= 0 for t in taus):
        raise ConfigurationError("all prototype temperatures must be > 0")
    cands = np.vstack([np.asarray(c_pos, dtype=np.float64)[None, :]] + [np.asarray(c, dtype=np.float64)[None, :] for c, _ in negs])
    inv_tau = 1.0 / np.asarray(taus, dtype=np.float64)
    return _nce(z, cands, inv_tau)


def _check_levels(reports: list[SelectionReport], expected: int, what: str):
    if len(reports) != expected or [r.level for r in reports] != list(range(1, expected + 1)):
        raise ContractError(f"{what} needs reports for levels 1..{expected} in order")


def icsc_loss(
    z: np.ndarray,
    z_prime: np.ndarray,
    selected: list[SelectionReport],
    snapshot: QueueSnapshot,
    tau: float,
) -> LossOutput:
    """Instance contrast averaged over levels with per-level accepted sets."""
    if not selected:
        raise ContractError("icsc_loss needs at least one level report")
    _check_levels(selected, len(selected), "icsc_loss")
    n_levels = len(selected)
    emb = np.asarray(snapshot.embeddings, dtype=np.float64)
    total = None
    for report in selected:
        if len(report.candidate_ids) != len(snapshot):
            raise ContractError("selection report does not match the snapshot")
        part = info_nce(z, z_prime, emb[report.accepted], tau)
        total = part if total is None else total + part
    return total.scaled(1.0 / n_levels)


def pcsc_loss(
    z: np.ndarray, tree: PrototypeTree, selected: list[SelectionReport]
) -> LossOutput:
    """Prototype contrast averaged over levels.

    The positive at each level is the query's nearest prototype; the
    level-L report must keep every non-positive prototype.
    """
    _check_levels(selected, tree.num_levels, "pcsc_loss")
    total = None
    for report in selected:
        level = report.level
        lv = tree.level(level)
        pos = nearest_prototype(z, tree, level)
        expected = np.array([i for i in range(lv.size) if i != pos], dtype=np.int64)
        if not np.array_equal(np.sort(report.candidate_ids), expected):
            raise ContractError(
                f"level-{level} report candidates must be all non-positive prototypes"
            )
        if level == tree.num_levels and not np.all(report.accepted):
            raise ContractError("top-level report must accept every candidate")
        kept = report.candidate_ids[report.accepted]
        negs = [(lv.prototypes[j], float(lv.tau[j])) for j in kept]
        part = proto_nce(z, (lv.prototypes[pos], float(lv.tau[pos])), negs)
        total = part if total is None else total + part
    return total.scaled(1.0 / tree.num_levels)


def hcsc_loss(
    icsc: LossOutput | None, pcsc: LossOutput | None, weights: LossWeights
) -> LossOutput:
    """Unweighted sum of the enabled loss terms."""
    dim = None
    for part in (icsc, pcsc):
        if part is not None:
            dim = part.grad_z.shape[0]
    if dim is None:
        raise ContractError("at least one loss term must be supplied")
    total = LossOutput(0.0, np.zeros(dim))
    if weights.instance_loss:
        if icsc is None:
            raise ContractError("instance loss enabled but no ICSC term supplied")
        total = total + icsc
    if weights.proto_loss:
        if pcsc is None:
            raise ContractError("prototype loss enabled but no PCSC term supplied")
        total = total + pcsc
    return total
