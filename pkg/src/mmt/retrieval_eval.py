"""Retrieval metrics (mAP, CMC top-k), cluster purity, and the symmetric KL
divergence between peer predictions."""

import numpy as np

from .diffcore import Tensor, no_grad
from .errors import EvalError, ShapeError
from .model import encode

_LOG_EPS = 1e-12


def rank_gallery(query_f, gallery_f):
    """Gallery indices by ascending Euclidean distance; ties break to the
    lower index."""
    gallery = np.asarray(gallery_f, dtype=np.float64)
    if gallery.size == 0:
        raise EvalError("empty gallery")
    d = np.linalg.norm(gallery - np.asarray(query_f, dtype=np.float64), axis=1)
    return np.argsort(d, kind="stable")


def average_precision(ranking, relevance_mask):
    """Mean over relevant ranks k of precision@k."""
    mask = np.asarray(relevance_mask, dtype=bool)[np.asarray(ranking)]
    if not mask.any():
        raise EvalError("query has no relevant gallery items")
    hits = np.cumsum(mask)
    ranks = np.arange(1, len(mask) + 1)
    return float((hits[mask] / ranks[mask]).mean())


def cmc_at_k(rankings, masks, k):
    """Fraction of queries with a relevant item in the top k; queries without
    any relevant item are excluded from the denominator."""
    if k < 1:
        raise EvalError("k must be >= 1")
    hits, valid = 0, 0
    for ranking, mask in zip(rankings, masks):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            continue
        valid += 1
        if mask[np.asarray(ranking)[:k]].any():
            hits += 1
    if valid == 0:
        raise EvalError("no query has relevant gallery items")
    return hits / valid


def peer_kl(probs1, probs2):
    """Mean over the batch of the symmetric KL divergence
    0.5 * [KL(p||q) + KL(q||p)], with clamped logs."""
    p = probs1.data if isinstance(probs1, Tensor) else np.asarray(probs1, dtype=np.float64)
    q = probs2.data if isinstance(probs2, Tensor) else np.asarray(probs2, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"peer_kl: shape mismatch {p.shape} vs {q.shape}")
    logp = np.log(np.clip(p, _LOG_EPS, None))
    logq = np.log(np.clip(q, _LOG_EPS, None))
    kl_pq = (p * (logp - logq)).sum(axis=-1)
    kl_qp = (q * (logq - logp)).sum(axis=-1)
    return float(np.mean(0.5 * (kl_pq + kl_qp)))


def cluster_purity(assignments, true_identities):
    """Sum over clusters of the majority identity count, over N."""
    assignments = np.asarray(assignments)
    identities = np.asarray(true_identities)
    if assignments.shape != identities.shape:
        raise ShapeError("assignments and identities must have equal length")
    total = 0
    for c in np.unique(assignments):
        members = identities[assignments == c]
        total += np.bincount(members).max()
    return total / len(assignments)


def split_query_gallery(identities, query_fraction, seed):
    """Per identity, a seeded draw of ~query_fraction of its samples becomes
    queries, the rest gallery. Returns (query_idx, gallery_idx)."""
    identities = np.asarray(identities)
    rng = np.random.default_rng(seed)
    query_idx, gallery_idx = [], []
    for identity in np.unique(identities):
        idx = np.flatnonzero(identities == identity)
        n_q = max(1, int(round(query_fraction * len(idx))))
        perm = rng.permutation(len(idx))
        query_idx.extend(idx[perm[:n_q]])
        gallery_idx.extend(idx[perm[n_q:]])
    return np.array(sorted(query_idx)), np.array(sorted(gallery_idx))


def evaluate_features(features, identities, query_fraction=0.25, seed=0):
    """Retrieval report for pre-computed (already normalized) features."""
    features = np.asarray(features, dtype=np.float64)
    identities = np.asarray(identities)
    q_idx, g_idx = split_query_gallery(identities, query_fraction, seed)
    gallery_f, gallery_id = features[g_idx], identities[g_idx]
    rankings, masks, aps, excluded = [], [], [], 0
    for qi in q_idx:
        mask = gallery_id == identities[qi]
        if not mask.any():
            excluded += 1
            continue
        ranking = rank_gallery(features[qi], gallery_f)
        rankings.append(ranking)
        masks.append(mask)
        aps.append(average_precision(ranking, mask))
    if not aps:
        raise EvalError("all queries lack relevant gallery items")
    return {
        "mAP": float(np.mean(aps)),
        "cmc1": cmc_at_k(rankings, masks, 1),
        "cmc5": cmc_at_k(rankings, masks, 5),
        "cmc10": cmc_at_k(rankings, masks, 10),
        "num_queries": len(aps),
        "excluded_queries": excluded,
    }


def normalize_rows(features):
    features = np.asarray(features, dtype=np.float64)
    return features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)


def evaluate_network(network, samples, query_fraction=0.25, seed=0):
    """Encode samples with one network (gradient-free), L2-normalize, and
    compute the retrieval report against ground-truth identities."""
    vectors = np.stack([s.vector for s in samples])
    identities = np.array([s.identity for s in samples], dtype=int)
    with no_grad():
        feats = encode(vectors, network.encoder).data
    return evaluate_features(normalize_rows(feats), identities, query_fraction, seed)
