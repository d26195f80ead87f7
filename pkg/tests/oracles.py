"""Brute-force reference implementations used as test oracles.

Everything here is written straight from the definitions with explicit
python loops and sets, independent of the package's vectorized code paths.
"""

import math

import numpy as np


def naive_sq_dist(u, v) -> float:
    s = 0.0
    for d in range(len(u)):
        s += (u[d] - v[d]) ** 2
    return s


def naive_pairwise_sq_dist(vectors) -> np.ndarray:
    n = len(vectors)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = naive_sq_dist(vectors[i], vectors[j])
    return out


def naive_cross_sq_dist(queries, gallery) -> np.ndarray:
    out = np.zeros((len(queries), len(gallery)))
    for i in range(len(queries)):
        for j in range(len(gallery)):
            out[i, j] = naive_sq_dist(queries[i], gallery[j])
    return out


def naive_hard_mine(dist, ids):
    """Per-anchor exhaustive scan over all same-id / different-id pairs."""
    n = len(ids)
    rows = []
    for a in range(n):
        best_pos, best_pos_idx = -math.inf, -1
        best_neg, best_neg_idx = math.inf, -1
        for j in range(n):
            if j == a:
                continue
            if ids[j] == ids[a]:
                if dist[a][j] > best_pos:
                    best_pos, best_pos_idx = dist[a][j], j
            else:
                if dist[a][j] < best_neg:
                    best_neg, best_neg_idx = dist[a][j], j
        valid = best_pos_idx >= 0 and best_neg_idx >= 0
        rows.append({
            "valid": valid,
            "max_pos": best_pos if valid else 0.0,
            "min_neg": best_neg if valid else 0.0,
            "pos_idx": best_pos_idx if valid else -1,
            "neg_idx": best_neg_idx if valid else -1,
        })
    return rows


def naive_evaluate(q_desc, q_ids, q_cams, g_desc, g_ids, g_cams, ks,
                   dist=None):
    """Explicit-loop CMC / mAP with same-id same-camera junk filtering.

    Ties in distance break toward the lower gallery index. Returns
    (rank_k dict, mAP, counted queries).
    """
    nq, ng = len(q_ids), len(g_ids)
    if dist is None:
        dist = naive_cross_sq_dist(q_desc, g_desc)
    counted = 0
    ap_sum = 0.0
    hits = {k: 0 for k in ks}
    for i in range(nq):
        order = sorted(range(ng), key=lambda j: (dist[i][j], j))
        ranked = [j for j in order
                  if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i])]
        matches = [g_ids[j] == q_ids[i] for j in ranked]
        if not any(matches):
            continue
        counted += 1
        precisions = []
        seen = 0
        for pos, hit in enumerate(matches, start=1):
            if hit:
                seen += 1
                precisions.append(seen / pos)
        ap_sum += sum(precisions) / len(precisions)
        for k in ks:
            if any(matches[:k]):
                hits[k] += 1
    if counted == 0:
        return {k: 0.0 for k in ks}, 0.0, 0
    return {k: hits[k] / counted for k in ks}, ap_sum / counted, counted


def _ordered_neighbors(dist_row, count):
    order = sorted(range(len(dist_row)), key=lambda j: (dist_row[j], j))
    return order[:count]


def rerank_reference(q_g, q_q, g_g, k1=20, k2=6, lambda_value=0.3):
    """k-reciprocal re-ranking written from the step-by-step definition.

    Mirrors the documented contract of the production routine using plain
    python sets and loops throughout.
    """
    q_g = np.asarray(q_g, dtype=np.float64)
    nq, ng = q_g.shape
    total = nq + ng
    dist = np.zeros((total, total))
    for i in range(total):
        for j in range(total):
            if i < nq and j < nq:
                dist[i, j] = q_q[i][j]
            elif i < nq <= j:
                dist[i, j] = q_g[i][j - nq]
            elif j < nq <= i:
                dist[i, j] = q_g[j][i - nq]
            else:
                dist[i, j] = g_g[i - nq][j - nq]
    peak = dist.max()
    if peak > 0:
        dist = dist / peak

    def reciprocal(i, k):
        forward = _ordered_neighbors(dist[i], k + 1)
        out = set()
        for j in forward:
            if i in _ordered_neighbors(dist[j], k + 1):
                out.add(j)
        return out

    half = max(1, int(np.rint(k1 / 2.0)))
    recip = [reciprocal(i, k1) for i in range(total)]
    recip_half = [reciprocal(i, half) for i in range(total)]

    v = np.zeros((total, total))
    for i in range(total):
        expanded = set(recip[i]) | {i}
        for c in recip[i]:
            cand = recip_half[c]
            if cand and len(cand & recip[i]) > (2.0 / 3.0) * len(cand):
                expanded |= cand
        idx = sorted(expanded)
        weights = [math.exp(-dist[i, j]) for j in idx]
        norm = sum(weights)
        for j, w in zip(idx, weights):
            v[i, j] = w / norm

    if k2 > 1:
        v_new = np.zeros_like(v)
        for i in range(total):
            neigh = _ordered_neighbors(dist[i], k2)
            for col in range(total):
                v_new[i, col] = sum(v[j, col] for j in neigh) / len(neigh)
        v = v_new

    final = np.zeros((nq, ng))
    for i in range(nq):
        for j in range(ng):
            col = nq + j
            num = sum(min(v[i, t], v[col, t]) for t in range(total))
            den = sum(max(v[i, t], v[col, t]) for t in range(total))
            jaccard = 1.0 - (num / den if den > 0 else 0.0)
            final[i, j] = lambda_value * q_g[i, j] + (1.0 - lambda_value) * jaccard
    return final


def nearest_neighbor_id_accuracy(query_images, query_ids, ref_images, ref_ids):
    """Raw-pixel 1-NN classification accuracy of query ids against a reference set."""
    correct = 0
    for qi, qid in zip(query_images, query_ids):
        best, best_id = math.inf, None
        for ri, rid in zip(ref_images, ref_ids):
            d = float(((qi - ri) ** 2).sum())
            if d < best:
                best, best_id = d, rid
        correct += int(best_id == qid)
    return correct / len(query_ids)


def random_retrieval_instance(rng, max_n=30, dim_range=(2, 6), cam_range=(1, 4)):
    """Random query/gallery instance with id and camera labels for oracle tests."""
    nq = int(rng.integers(1, max_n + 1))
    ng = int(rng.integers(2, max_n + 1))
    d = int(rng.integers(*dim_range))
    n_ids = int(rng.integers(1, 8))
    n_cams = int(rng.integers(*cam_range))
    q_desc = rng.normal(size=(nq, d))
    g_desc = rng.normal(size=(ng, d))
    q_ids = rng.integers(0, n_ids, size=nq)
    g_ids = rng.integers(0, n_ids, size=ng)
    q_cams = rng.integers(0, n_cams, size=nq)
    g_cams = rng.integers(0, n_cams, size=ng)
    return q_desc, q_ids, q_cams, g_desc, g_ids, g_cams
