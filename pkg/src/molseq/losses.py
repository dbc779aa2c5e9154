"""Training losses: supervised contrastive alignment, batch-hard triplet,
center loss with its update rule, classification cross-entropy, and the
weighted total.

The alignment loss treats the self/class target matrices as soft
cross-entropy targets: each row (and column) is normalized to a
probability distribution, so multi-positive rows become uniform over the
positives and one-hot targets reduce the loss to the standard symmetric
two-direction contrastive cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import LabelOutOfRange, NonFiniteValue, ShapeMismatch

__all__ = [
    "DegenerateBatch",
    "NonFiniteComponent",
    "SupervisionPair",
    "SimilarityMatrix",
    "CenterState",
    "LossWeights",
    "build_supervision",
    "similarity",
    "msc_loss",
    "hard_triplet_loss",
    "center_loss",
    "update_centers",
    "classification_ce",
    "total_loss",
]


class DegenerateBatch(ValueError):
    """A batch label has no positive or no negative for triplet mining."""


class NonFiniteComponent(ArithmeticError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"loss component {name!r} is not finite")


@dataclass(frozen=True)
class SupervisionPair:
    """Self matrix (identity) and class matrix (same-label indicator)."""

    m_self: np.ndarray
    m_class: np.ndarray


def build_supervision(labels) -> SupervisionPair:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size < 1:
        raise ValueError("labels must be a non-empty 1-D sequence")
    m_class = (labels[:, None] == labels[None, :]).astype(np.float64)
    return SupervisionPair(m_self=np.eye(labels.size), m_class=m_class)


@dataclass
class SimilarityMatrix:
    sv: ad.Tensor
    temperature: float


def similarity(s: ad.Tensor, v: ad.Tensor, temperature: float | ad.Tensor = 0.07) -> SimilarityMatrix:
    """Temperature-scaled inner products of row-normalized features.

    Rows of both matrices are L2-normalized before the product; a
    trainable inverse-temperature can be passed as a 0-d tensor holding
    log(1/tau).
    """
    if s.shape != v.shape or len(s.shape) != 2:
        raise ShapeMismatch("similarity", (s.shape, v.shape))
    raw = ad.matmul(ad.l2_normalize_rows(s), ad.transpose(ad.l2_normalize_rows(v)))
    if isinstance(temperature, ad.Tensor):
        sv = ad.mul(raw, ad.exp(temperature))
        tau = float(np.exp(-temperature.data))
    else:
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        sv = ad.scale(raw, 1.0 / temperature)
        tau = float(temperature)
    return SimilarityMatrix(sv=sv, temperature=tau)


def _soft_ce(sv: ad.Tensor, targets: np.ndarray, direction: str) -> ad.Tensor:
    """Bidirectional soft-target cross-entropy against a 0/1 target matrix."""
    if targets.shape != sv.shape:
        raise ShapeMismatch("soft_ce", (sv.shape, targets.shape))
    terms = []
    if direction in ("both", "row"):
        row_t = targets / targets.sum(axis=1, keepdims=True)
        picked = ad.sum_(ad.mul(ad.row_log_softmax(sv), ad.constant(row_t)))
        terms.append(ad.scale(picked, -1.0 / sv.shape[0]))
    if direction in ("both", "col"):
        col_t = (targets / targets.sum(axis=0, keepdims=True)).T
        picked = ad.sum_(ad.mul(ad.row_log_softmax(ad.transpose(sv)), ad.constant(col_t)))
        terms.append(ad.scale(picked, -1.0 / sv.shape[1]))
    if not terms:
        raise ValueError(f"direction must be 'both', 'row' or 'col', got {direction!r}")
    if len(terms) == 1:
        return terms[0]
    return ad.scale(ad.add(terms[0], terms[1]), 0.5)


def msc_loss(sim: SimilarityMatrix, sup: SupervisionPair, direction: str = "both") -> ad.Tensor:
    """Alignment loss: soft CE against the self target plus the class target."""
    return ad.add(_soft_ce(sim.sv, sup.m_self, direction), _soft_ce(sim.sv, sup.m_class, direction))


def _mine_hard(dists: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch-hard indices: farthest positive, nearest negative per anchor."""
    b = labels.size
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all() or not neg_mask.any(axis=1).all():
        raise DegenerateBatch("every anchor needs at least one positive and one negative")
    hard_pos = np.where(pos_mask, dists, -np.inf).argmax(axis=1)
    hard_neg = np.where(neg_mask, dists, np.inf).argmin(axis=1)
    return hard_pos, hard_neg


def hard_triplet_loss(features: ad.Tensor, labels, margin: float = 0.3) -> ad.Tensor:
    """Mean over anchors of max(0, d(A, hardest pos) - d(A, hardest neg) + margin).

    Distances are squared Euclidean; mining happens outside the graph, the
    hinge differentiates through the selected pairs only.
    """
    labels = np.asarray(labels)
    dists = ad.pairwise_sq_dists(features, features)
    hard_pos, hard_neg = _mine_hard(dists.data, labels)
    b = labels.size
    pos_sel = np.zeros((b, b))
    neg_sel = np.zeros((b, b))
    pos_sel[np.arange(b), hard_pos] = 1.0
    neg_sel[np.arange(b), hard_neg] = 1.0
    pos_d = ad.sum_(ad.mul(dists, ad.constant(pos_sel)), axis=1)
    neg_d = ad.sum_(ad.mul(dists, ad.constant(neg_sel)), axis=1)
    hinge = ad.relu(ad.add(ad.sub(pos_d, neg_d), ad.constant(margin)))
    return ad.mean(hinge)


@dataclass
class CenterState:
    """Per-class feature centers plus their update rate."""

    centers: np.ndarray
    alpha: float = 0.5

    @classmethod
    def zeros(cls, num_classes: int, dim: int, alpha: float = 0.5) -> "CenterState":
        return cls(centers=np.zeros((num_classes, dim)), alpha=alpha)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(int(labels.max()), num_classes)


def center_loss(features: ad.Tensor, labels, state: CenterState) -> ad.Tensor:
    """Half the summed squared distance of each feature to its class center."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels, state.num_classes)
    picked = ad.gather_rows(ad.constant(state.centers), labels)
    diff = ad.sub(features, picked)
    return ad.scale(ad.sum_(ad.mul(diff, diff)), 0.5)


def update_centers(state: CenterState, features: np.ndarray, labels) -> CenterState:
    """Move each present class center toward its batch members.

    delta_c = sum_{i in c} (C_c - V_i) / (1 + count_c); C_c -= alpha * delta_c.
    Classes absent from the batch are untouched.  Mutates and returns state.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels, state.num_classes)
    for c in np.unique(labels):
        members = features[labels == c]
        delta = (state.centers[c] - members).sum(axis=0) / (1.0 + members.shape[0])
        state.centers[c] = state.centers[c] - state.alpha * delta
    return state


def classification_ce(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    _check_labels(labels, k)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.sum_(ad.mul(ad.row_log_softmax(logits), ad.constant(onehot)))
    return ad.scale(picked, -1.0 / b)


@dataclass
class LossWeights:
    """Loss-term coefficients; defaults follow the training recipe."""

    msc: float = 1.0
    triplet: float = 1.0
    center: float = 0.1
    cls: float = 1.0
    margin: float = 0.3

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return cls(**data)


def total_loss(components: dict[str, ad.Tensor | None], weights: LossWeights) -> tuple[ad.Tensor, dict[str, float]]:
    """Weighted sum of the loss terms plus an unweighted per-term report.

    Components map names in {"msc", "triplet", "center", "cls"} to scalar
    tensors; None entries (e.g. a disabled branch) contribute nothing.
    """
    report: dict[str, float] = {}
    total: ad.Tensor | None = None
    for name in ("msc", "triplet", "center", "cls"):
        comp = components.get(name)
        if comp is None:
            report[name] = 0.0
            continue
        value = float(comp.data)
        if not np.isfinite(value):
            raise NonFiniteComponent(name)
        report[name] = value
        term = ad.scale(comp, getattr(weights, name))
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.constant(0.0)
    report["total"] = float(total.data)
    return total, report
