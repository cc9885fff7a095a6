"""Bernoulli selection of negative candidates.

A candidate is kept with probability one minus its softmax affinity to the
query's cluster, evaluated across all prototypes of the same level: the
more a candidate looks like the query's own cluster, the more likely it is
rejected. Instance candidates come from the negative queue; prototype
candidates are the non-positive prototypes of the level, judged against
the positive's parent one level up. The top level skips selection
entirely, since its clusters are already maximally distinct.
"""

from dataclasses import dataclass

import numpy as np

from .encoder import QueueSnapshot
from .errors import ContractError
from .hierarchy import PrototypeTree, nearest_prototype
from .numerics import softmax


@dataclass
class SelectionReport:
    """Per-candidate probabilities and accept flags for one level."""

    level: int
    candidate_ids: np.ndarray  # int64; queue sample ids or prototype indices
    probabilities: np.ndarray  # float64 in [0, 1]
    accepted: np.ndarray  # bool

    def __post_init__(self):
        if not (
            len(self.candidate_ids) == len(self.probabilities) == len(self.accepted)
        ):
            raise ContractError("report fields must have equal length")


DIAGNOSTICS_CSV_HEADER = "step,level,query_id,candidate_id,p,accepted"


def report_csv_rows(step: int, query_id: int, report: "SelectionReport") -> list[str]:
    """Render one report as diagnostics CSV rows (schema above)."""
    return [
        f"{step},{report.level},{query_id},{int(cid)},{repr(float(p))},{int(acc)}"
        for cid, p, acc in zip(
            report.candidate_ids, report.probabilities, report.accepted
        )
    ]


def cluster_similarity(v: np.ndarray, tree: PrototypeTree, level: int, j: int) -> float:
    """Temperature-scaled dot product between v and prototype j."""
    lv = tree.level(level)
    if not (0 <= j < lv.size):
        raise ContractError(f"prototype index {j} outside level {level}")
    v = np.asarray(v, dtype=np.float64)
    return float((lv.prototypes[j] @ v) / lv.tau[j])


def _complement_table(candidates: np.ndarray, tree: PrototypeTree, level: int) -> np.ndarray:
    """1 - softmax of scaled similarities, rows = candidates, cols = prototypes."""
    lv = tree.level(level)
    scores = (np.asarray(candidates, dtype=np.float64) @ lv.prototypes.T) / lv.tau[None, :]
    return 1.0 - softmax(scores, axis=1)


def instance_selection_prob(
    z_j: np.ndarray, z: np.ndarray, tree: PrototypeTree, level: int
) -> float:
    """Probability of keeping queue candidate z_j for query z at a level."""
    pos = nearest_prototype(z, tree, level)
    table = _complement_table(np.atleast_2d(z_j), tree, level)
    return float(table[0, pos])


def instance_probability_tables(
    snapshot: QueueSnapshot, tree: PrototypeTree
) -> list[np.ndarray]:
    """Per-level (Q, M_l) keep-probability tables for a queue snapshot.

    Row q, column i is the probability of keeping candidate q for any
    query whose positive cluster at that level is prototype i. Computing
    the table once per step amortizes the softmax over the whole batch.
    """
    emb = np.asarray(snapshot.embeddings, dtype=np.float64)
    return [
        _complement_table(emb, tree, level)
        for level in range(1, tree.num_levels + 1)
    ]


def select_instance_negatives(
    z: np.ndarray,
    snapshot: QueueSnapshot,
    tree: PrototypeTree,
    rng: np.random.Generator,
    tables: list[np.ndarray] | None = None,
) -> list[SelectionReport]:
    """Independent Bernoulli draws per candidate at every level.

    Consumes the rng in level order (one uniform per candidate per level),
    so results are reproducible for a fixed stream regardless of whether
    precomputed tables are supplied.
    """
    if tables is None:
        tables = instance_probability_tables(snapshot, tree)
    if len(tables) != tree.num_levels:
        raise ContractError("one probability table per level required")
    reports = []
    q = len(snapshot)
    for level in range(1, tree.num_levels + 1):
        pos = nearest_prototype(z, tree, level)
        p = tables[level - 1][:, pos]
        u = rng.random(q)
        reports.append(
            SelectionReport(
                level=level,
                candidate_ids=snapshot.ids.astype(np.int64, copy=True),
                probabilities=np.asarray(p, dtype=np.float64).copy(),
                accepted=u < p,
            )
        )
    return reports


def proto_selection_prob(j: int, pos: int, tree: PrototypeTree, level: int) -> float:
    """Probability of keeping prototype j as a negative for positive pos."""
    if level >= tree.num_levels:
        raise ContractError("top-level prototypical selection has no parent hierarchy")
    if j == pos:
        raise ContractError("candidate must differ from the positive prototype")
    lv = tree.level(level)
    if not (0 <= j < lv.size and 0 <= pos < lv.size):
        raise ContractError("prototype index out of range")
    parent = int(lv.parent[pos])
    table = _complement_table(lv.prototypes[j : j + 1], tree, level + 1)
    return float(table[0, parent])


def select_proto_negatives(
    z: np.ndarray, tree: PrototypeTree, level: int, rng: np.random.Generator
) -> SelectionReport:
    """Bernoulli-select negative prototypes for one level.

    At the top level every non-positive prototype is accepted and no
    randomness is consumed; probabilities are recorded as 1.
    """
    lv = tree.level(level)
    pos = nearest_prototype(z, tree, level)
    candidates = np.array([i for i in range(lv.size) if i != pos], dtype=np.int64)
    if level == tree.num_levels:
        p = np.ones(candidates.size, dtype=np.float64)
        accepted = np.ones(candidates.size, dtype=bool)
    elif candidates.size == 0:
        p = np.zeros(0, dtype=np.float64)
        accepted = np.zeros(0, dtype=bool)
    else:
        parent = int(lv.parent[pos])
        table = _complement_table(lv.prototypes[candidates], tree, level + 1)
        p = table[:, parent].copy()
        accepted = rng.random(candidates.size) < p
    return SelectionReport(
        level=level, candidate_ids=candidates, probabilities=p, accepted=accepted
    )
