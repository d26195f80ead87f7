"""Retrieval metrics (CMC rank-k, mAP) and k-reciprocal re-ranking.

Evaluation follows the usual cross-camera protocol: gallery entries sharing
both the query's identity and camera are junk and removed from its ranking;
queries left without any positive are skipped and not counted. AP is the
mean of precision-at-each-correct-hit over the filtered ranking, and all
distance ties break toward the lower gallery index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .elastic_loss import sq_dist_matrix
from .errors import ConfigError, ShapeError

Array = np.ndarray


@dataclass
class RetrievalSet:
    """Descriptors with identity and camera labels for one side of a split."""

    descriptors: Array
    ids: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.ids = np.asarray(self.ids)
        self.cameras = np.asarray(self.cameras)
        n = self.descriptors.shape[0] if self.descriptors.ndim == 2 else -1
        if n < 0 or self.ids.shape != (n,) or self.cameras.shape != (n,):
            raise ShapeError(
                f"RetrievalSet: descriptors {self.descriptors.shape}, ids "
                f"{self.ids.shape}, cameras {self.cameras.shape} do not agree")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("RetrievalSet: descriptors must be finite")

    def __len__(self) -> int:
        return self.descriptors.shape[0]


QuerySet = RetrievalSet
GallerySet = RetrievalSet


@dataclass
class EvalMetrics:
    """Rank-k hit rates, mAP and the number of counted queries."""

    rank_k: dict[int, float]
    mAP: float
    num_valid_queries: int

    def to_dict(self) -> dict:
        return {
            "rank": {str(k): v for k, v in sorted(self.rank_k.items())},
            "mAP": self.mAP,
            "num_valid_queries": self.num_valid_queries,
        }


def evaluate(query: QuerySet, gallery: GallerySet, ks=(1, 5, 10),
             dist: Array | None = None) -> EvalMetrics:
    """Rank the gallery per query by ascending squared distance and score it.

    ``dist`` may supply a precomputed (and possibly re-ranked) query-gallery
    distance matrix; otherwise squared euclidean distances are used.
    """
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise ConfigError(f"evaluate: ks must be positive integers, got {ks}")
    if len(gallery) == 0:
        raise ConfigError("evaluate: gallery is empty")
    if dist is None:
        if query.descriptors.shape[1] != gallery.descriptors.shape[1]:
            raise ShapeError(
                f"evaluate: query dim {query.descriptors.shape[1]} vs gallery "
                f"dim {gallery.descriptors.shape[1]}")
        dist = sq_dist_matrix(query.descriptors, gallery.descriptors)
    else:
        dist = np.asarray(dist, dtype=np.float64)
        if dist.shape != (len(query), len(gallery)):
            raise ShapeError(
                f"evaluate: dist {dist.shape} vs ({len(query)}, {len(gallery)})")

    counted = 0
    ap_sum = 0.0
    hits = {k: 0 for k in ks}
    for i in range(len(query)):
        order = np.argsort(dist[i], kind="stable")
        junk = (gallery.ids == query.ids[i]) & (gallery.cameras == query.cameras[i])
        ranked = order[~junk[order]]
        match = gallery.ids[ranked] == query.ids[i]
        if not match.any():
            continue
        counted += 1
        hit_pos = np.flatnonzero(match)
        precisions = (np.arange(hit_pos.size) + 1.0) / (hit_pos + 1.0)
        # sequential summation keeps AP bit-identical to a plain loop
        ap_sum += sum(precisions.tolist()) / hit_pos.size
        for k in ks:
            if match[:k].any():
                hits[k] += 1
    if counted == 0:
        return EvalMetrics({k: 0.0 for k in ks}, 0.0, 0)
    return EvalMetrics({k: hits[k] / counted for k in ks}, ap_sum / counted, counted)


def _reciprocal_set(rank: Array, i: int, k: int) -> Array:
    """Indices j among i's top-(k+1) whose own top-(k+1) contains i."""
    forward = rank[i, :k + 1]
    backward = rank[forward, :k + 1]
    return forward[(backward == i).any(axis=1)]


def k_reciprocal_rerank(q_g, q_q, g_g, k1: int = 20, k2: int = 6,
                        lambda_value: float = 0.3) -> Array:
    """Refine query-gallery distances with k-reciprocal neighborhood encoding.

    Steps, on the pooled (nq + ng) point set with distances normalized by
    their global maximum:

    1. reciprocal neighbor set R(i, k1), expanded by each candidate's
       R(c, round(k1/2)) whenever two thirds of it already overlaps R(i, k1);
    2. sparse feature V[i] = normalized exp(-dist) over the expanded set
       (the point itself is always included);
    3. local query expansion: V[i] replaced by the mean of V over i's top-k2
       neighbors (skipped for k2 <= 1);
    4. Jaccard distance 1 - sum(min(Vi, Vj)) / sum(max(Vi, Vj));
    5. output lambda * original_q_g + (1 - lambda) * jaccard.
    """
    q_g = np.asarray(q_g, dtype=np.float64)
    q_q = np.asarray(q_q, dtype=np.float64)
    g_g = np.asarray(g_g, dtype=np.float64)
    nq, ng = q_g.shape if q_g.ndim == 2 else (-1, -1)
    if nq < 0 or q_q.shape != (nq, nq) or g_g.shape != (ng, ng):
        raise ShapeError(
            f"k_reciprocal_rerank: blocks {q_g.shape}, {q_q.shape}, {g_g.shape} "
            "do not assemble")
    total = nq + ng
    if not (1 <= k1 < total and 1 <= k2 < total):
        raise ConfigError(
            f"k_reciprocal_rerank: k1={k1}, k2={k2} must lie in [1, {total})")
    if not 0.0 <= lambda_value <= 1.0:
        raise ConfigError(f"k_reciprocal_rerank: lambda {lambda_value} outside [0, 1]")

    full = np.block([[q_q, q_g], [q_g.T, g_g]])
    peak = full.max()
    norm = full / peak if peak > 0 else full.copy()
    rank = np.argsort(norm, axis=1, kind="stable")

    half = max(1, int(np.rint(k1 / 2.0)))
    recip = [_reciprocal_set(rank, i, k1) for i in range(total)]
    recip_half = [_reciprocal_set(rank, i, half) for i in range(total)]

    v = np.zeros((total, total))
    for i in range(total):
        base = set(int(j) for j in recip[i])
        expanded = base | {i}
        for c in recip[i]:
            cand = set(int(j) for j in recip_half[c])
            if cand and len(cand & base) > (2.0 / 3.0) * len(cand):
                expanded |= cand
        idx = np.fromiter(sorted(expanded), dtype=np.int64)
        weights = np.exp(-norm[i, idx])
        v[i, idx] = weights / weights.sum()

    if k2 > 1:
        v = np.stack([v[rank[i, :k2]].mean(axis=0) for i in range(total)])

    v_gallery = v[nq:]
    jaccard = np.zeros((nq, ng))
    for i in range(nq):
        mins = np.minimum(v[i], v_gallery).sum(axis=1)
        maxs = np.maximum(v[i], v_gallery).sum(axis=1)
        jaccard[i] = 1.0 - np.divide(mins, maxs, out=np.zeros(ng), where=maxs > 0)

    return lambda_value * q_g + (1.0 - lambda_value) * jaccard


def clamped_rerank_params(nq: int, ng: int, k1: int, k2: int) -> tuple[int, int]:
    """Shrink (k1, k2) to fit a small query/gallery pool."""
    total = nq + ng
    return max(1, min(k1, total - 1)), max(1, min(k2, total - 1))
