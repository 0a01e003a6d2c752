"""Training objectives: hard/soft classification, hinge triplet,
hard/soft softmax-triplet, and the combined two-network objective,
all with in-batch hardest mining."""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, no_grad
from .errors import MiningError, NumericError, ShapeError
from .model import classify, encode


@dataclass
class MiningResult:
    """Per-anchor hardest positive and hardest negative indices."""

    positive: np.ndarray  # [B]
    negative: np.ndarray  # [B]


@dataclass
class LossWeights:
    lambda_id: float = 0.5
    lambda_tri: float = 0.8
    lambda_source: float = 1.0
    margin: float = 0.5


def mine_hardest(features, labels):
    """For each anchor: the most distant same-label sample (excluding the
    anchor itself) and the nearest different-label sample. Ties break to the
    lowest index."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = data.shape[0]
    if labels.shape[0] != n:
        raise ShapeError("mine_hardest: labels must align with features")
    label_eq = labels[:, None] == labels[None, :]
    if len(np.unique(labels)) < 2:
        raise MiningError("mining needs at least two distinct labels in the batch")
    if (label_eq.sum(axis=1) < 2).any():
        bad = labels[np.flatnonzero(label_eq.sum(axis=1) < 2)[0]]
        raise MiningError(f"label {bad} occurs only once in the batch")
    sq = (data * data).sum(axis=1)
    d2 = np.maximum(sq[:, None] - 2.0 * data @ data.T + sq[None, :], 0.0)
    same = label_eq.copy()
    np.fill_diagonal(same, False)
    pos = np.where(same, d2, -np.inf).argmax(axis=1)  # first max = lowest index
    neg = np.where(~label_eq, d2, np.inf).argmin(axis=1)
    return MiningResult(positive=pos, negative=neg)


def _anchor_distances(features, mining):
    pos = dc.take_rows(features, mining.positive)
    neg = dc.take_rows(features, mining.negative)
    d_p = dc.row_l2_distance(features, pos)
    d_n = dc.row_l2_distance(features, neg)
    return d_p, d_n


def hard_ce_loss(probs, labels):
    """Mean negative log-probability of the assigned class."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    labels = np.asarray(labels, dtype=int)
    n, m = probs.data.shape
    if labels.min() < 0 or labels.max() >= m:
        raise ShapeError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, m))
    onehot[np.arange(n), labels] = 1.0
    return dc.neg(dc.tmean(dc.tsum(dc.mul(Tensor(onehot), dc.log_clipped(probs)), axis=1)))


def soft_ce_loss(student_probs, teacher_probs):
    """Cross-entropy against a probability-vector target; no gradient flows
    into the teacher."""
    student = student_probs if isinstance(student_probs, Tensor) else Tensor(student_probs)
    teacher = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    if student.data.shape != teacher.shape:
        raise ShapeError(f"soft_ce_loss: shape mismatch {student.data.shape} vs {teacher.shape}")
    return dc.neg(dc.tmean(dc.tsum(dc.mul(Tensor(teacher), dc.log_clipped(student)), axis=1)))


def hard_triplet_loss(features, mining, margin):
    """Mean hinge max(0, d_pos + margin - d_neg) over anchors."""
    d_p, d_n = _anchor_distances(features, mining)
    return dc.tmean(dc.relu(dc.add(dc.sub(d_p, d_n), margin)))


def softmax_triplet_T(features, mining, anchor=None):
    """Two-way softmax over anchor distances: the confidence that the hardest
    negative sits farther than the hardest positive. Returns the [B] vector,
    or the scalar for one anchor."""
    d_p, d_n = _anchor_distances(features, mining)
    t = dc.sigmoid(dc.sub(d_n, d_p))  # exp(d_n) / (exp(d_p) + exp(d_n))
    if anchor is None:
        return t
    return dc.tsum(dc.take_rows(t, [anchor]))


def _bce(pred, target):
    # target is constant; pred clamped away from {0, 1} before the logs
    t = np.asarray(target, dtype=np.float64)
    one_m = dc.log_clipped(dc.sub(1.0, pred))
    return dc.neg(dc.tmean(dc.add(dc.mul(Tensor(t), dc.log_clipped(pred)), dc.mul(Tensor(1.0 - t), one_m))))


def hard_softmax_triplet_loss(features, mining):
    """Binary cross-entropy of the softmax-triplet confidence against 1."""
    t = softmax_triplet_T(features, mining)
    return dc.neg(dc.tmean(dc.log_clipped(t)))


def soft_softmax_triplet_loss(student_features, teacher_T, mining):
    """Binary cross-entropy of the student's softmax-triplet confidence
    against the teacher's, which is treated as a fixed supervision."""
    target = teacher_T.data if isinstance(teacher_T, Tensor) else np.asarray(teacher_T, dtype=np.float64)
    if not np.isfinite(target).all():
        raise NumericError("soft triplet targets must be finite")
    target = np.clip(target, 1e-12, 1.0 - 1e-12)
    student_T = softmax_triplet_T(student_features, mining)
    return _bce(student_T, target)


def total_mmt_loss(batch, pair, pseudo_labels, weights, *, single_network=False, teacher_own_mining=False):
    """Combined objective over both networks with cross-supervision:
    each network's soft targets come from the peer's temporal-average model
    evaluated on the peer's view. Teacher passes are gradient-free.

    ``batch`` carries the two augmented views (view1 for net1, view2 for
    net2). Returns (scalar loss, per-term diagnostics).
    """
    labels = np.asarray(pseudo_labels, dtype=int)
    x1, x2 = Tensor(batch.view1), Tensor(batch.view2)

    f1 = encode(x1, pair.net1.encoder)
    p1 = classify(f1, pair.net1.classifier)
    with no_grad():
        teacher2 = pair.avg1 if single_network else pair.avg2
        f2t = encode(x2, teacher2.encoder)
        p2t = classify(f2t, teacher2.classifier)
        if not single_network:
            f1t = encode(x1, pair.avg1.encoder)
            p1t = classify(f1t, pair.avg1.classifier)

    mining1 = mine_hardest(f1, labels)
    id1 = hard_ce_loss(p1, labels)
    sid1 = soft_ce_loss(p1, p2t)
    tri1 = hard_softmax_triplet_loss(f1, mining1)
    with no_grad():
        m1 = mine_hardest(f2t, labels) if teacher_own_mining else mining1
        teacher_T_for1 = softmax_triplet_T(f2t, m1)
    stri1 = soft_softmax_triplet_loss(f1, teacher_T_for1, mining1)

    if single_network:
        zero = Tensor(0.0)
        id2 = sid2 = tri2 = stri2 = zero
    else:
        f2 = encode(x2, pair.net2.encoder)
        p2 = classify(f2, pair.net2.classifier)
        mining2 = mine_hardest(f2, labels)
        id2 = hard_ce_loss(p2, labels)
        sid2 = soft_ce_loss(p2, p1t)
        tri2 = hard_softmax_triplet_loss(f2, mining2)
        with no_grad():
            m2 = mine_hardest(f1t, labels) if teacher_own_mining else mining2
            teacher_T_for2 = softmax_triplet_T(f1t, m2)
        stri2 = soft_softmax_triplet_loss(f2, teacher_T_for2, mining2)

    lam_id, lam_tri = weights.lambda_id, weights.lambda_tri
    total = dc.add(
        dc.add(
            dc.mul(1.0 - lam_id, dc.add(id1, id2)),
            dc.mul(lam_id, dc.add(sid1, sid2)),
        ),
        dc.add(
            dc.mul(1.0 - lam_tri, dc.add(tri1, tri2)),
            dc.mul(lam_tri, dc.add(stri1, stri2)),
        ),
    )
    diagnostics = {
        "id1": id1.item(),
        "id2": id2.item(),
        "sid1": sid1.item(),
        "sid2": sid2.item(),
        "tri1": tri1.item(),
        "tri2": tri2.item(),
        "stri1": stri1.item(),
        "stri2": stri2.item(),
        "total": total.item(),
    }
    return total, diagnostics
