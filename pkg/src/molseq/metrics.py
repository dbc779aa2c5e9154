"""Retrieval evaluation (CMC curve, Rank-k, mAP) and classification accuracy.

Queries and gallery are disjoint by construction of the split protocol, so
no self-match filtering happens here.  Ranking is by descending cosine
similarity with ties broken by ascending gallery index; a Euclidean mode
exists for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch

__all__ = ["QueryLabelAbsent", "RetrievalResult", "rank_gallery", "evaluate_retrieval", "accuracy"]


class QueryLabelAbsent(ValueError):
    def __init__(self, label: int) -> None:
        self.label = label
        super().__init__(f"query label {label} does not appear in the gallery")


@dataclass
class RetrievalResult:
    ranked_indices: list[np.ndarray]
    average_precisions: np.ndarray  # [Q]
    cmc: np.ndarray  # [max_rank], non-decreasing in [0, 1]
    rank1: float
    rank5: float
    rank10: float
    map: float

    def rank_k(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def _normalize(embs: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embs, axis=1, keepdims=True)
    return embs / np.maximum(norms, 1e-12)


def rank_gallery(query_emb: np.ndarray, gallery_embs: np.ndarray, measure: str = "cosine") -> np.ndarray:
    """Gallery indices ranked best-first for one query embedding."""
    query_emb = np.asarray(query_emb, dtype=np.float64)
    gallery_embs = np.asarray(gallery_embs, dtype=np.float64)
    if query_emb.ndim != 1 or gallery_embs.ndim != 2 or gallery_embs.shape[1] != query_emb.size:
        raise ShapeMismatch("rank_gallery", (query_emb.shape, gallery_embs.shape))
    if gallery_embs.shape[0] < 1:
        raise ShapeMismatch("rank_gallery", (gallery_embs.shape,))
    if measure == "cosine":
        scores = _normalize(gallery_embs) @ _normalize(query_emb[None, :])[0]
        # Stable argsort of the negated scores: ties fall back to index order.
        return np.argsort(-scores, kind="stable")
    if measure == "euclidean":
        d = np.linalg.norm(gallery_embs - query_emb[None, :], axis=1)
        return np.argsort(d, kind="stable")
    raise ValueError(f"measure must be 'cosine' or 'euclidean', got {measure!r}")


def evaluate_retrieval(
    query_embs: np.ndarray,
    query_labels,
    gallery_embs: np.ndarray,
    gallery_labels,
    max_rank: int = 20,
    measure: str = "cosine",
) -> RetrievalResult:
    """Standard retrieval scoring over the full ranked gallery.

    AP is the mean, over the relevant gallery items, of precision at each
    item's rank; CMC[k] is the fraction of queries with a correct match in
    the top k.
    """
    query_embs = np.asarray(query_embs, dtype=np.float64)
    gallery_embs = np.asarray(gallery_embs, dtype=np.float64)
    q_labels = np.asarray(query_labels)
    g_labels = np.asarray(gallery_labels)
    if query_embs.shape[0] != q_labels.size or gallery_embs.shape[0] != g_labels.size:
        raise ShapeMismatch("evaluate_retrieval", (query_embs.shape, gallery_embs.shape))
    num_g = gallery_embs.shape[0]
    max_rank = min(max_rank, num_g)
    gallery_label_set = set(g_labels.tolist())

    ranked_all: list[np.ndarray] = []
    aps = np.zeros(q_labels.size)
    first_hit = np.zeros(q_labels.size, dtype=np.int64)
    for qi in range(q_labels.size):
        if q_labels[qi] not in gallery_label_set:
            raise QueryLabelAbsent(q_labels[qi])
        order = rank_gallery(query_embs[qi], gallery_embs, measure)
        ranked_all.append(order)
        matches = (g_labels[order] == q_labels[qi]).astype(np.float64)
        cum = np.cumsum(matches)
        precisions = cum / np.arange(1, num_g + 1)
        aps[qi] = (precisions * matches).sum() / matches.sum()
        first_hit[qi] = int(np.argmax(matches)) + 1  # rank of the first correct item

    ranks = np.arange(1, max_rank + 1)
    cmc = (first_hit[None, :] <= ranks[:, None]).mean(axis=1)
    result = RetrievalResult(
        ranked_indices=ranked_all,
        average_precisions=aps,
        cmc=cmc,
        rank1=float(cmc[0]),
        rank5=float(cmc[min(5, max_rank) - 1]),
        rank10=float(cmc[min(10, max_rank) - 1]),
        map=float(aps.mean()),
    )
    assert np.all(np.diff(result.cmc) >= 0) and result.rank1 <= result.rank5 <= result.rank10
    return result


def accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) hits the label."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeMismatch("accuracy", (logits.shape, labels.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelOutOfRange(int(labels.max()), logits.shape[1])
    return float((logits.argmax(axis=1) == labels).mean())
