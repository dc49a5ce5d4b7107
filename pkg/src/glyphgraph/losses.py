"""The four training objectives and their weighted combination.

Character: cross-entropy with log-sum-exp stabilization. Component: summed
cross-entropy over greedily IoU-matched regions, plus a constant
uniform-logit penalty for unmatched ground truth. Structural: squared
deviation of the stored final-step features from a recomputation of that
step (gradients flow through the recomputation only), plus a weighted L1
between true and predicted component adjacency. Semantic: summed binary
cross-entropy over the concept vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, DivergenceError


@dataclass
class LossWeights:
    char: float = 1.0
    comp: float = 0.5
    struct: float = 0.25
    sem: float = 0.5
    beta: float = 0.1

    @classmethod
    def from_config(cls, cfg):
        return cls(char=cfg.lambda1, comp=cfg.lambda2, struct=cfg.lambda3, sem=cfg.lambda4, beta=cfg.beta)


def loss_char(char_logits, label):
    """Cross-entropy of a 1 x C logit row against an integer label."""
    n_classes = char_logits.data.shape[1]
    if not 0 <= label < n_classes:
        raise DataError(f"label {label} outside vocabulary of {n_classes} classes")
    lse = T.logsumexp(char_logits, axis=1, keepdims=True)
    return T.sub(lse, T.narrow(char_logits, 1, label, 1))


def iou(box_a, box_b):
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def match_components(pred_boxes, gt_boxes, threshold=0.3):
    """Greedy one-to-one IoU matching of predictions to ground truth.

    Returns (pairs, unmatched_gt_count); pairs are (pred_index, gt_index).
    Ground-truth entries without a bounding box count as unmatched.
    """
    candidates = []
    for pi, pb in enumerate(pred_boxes):
        for gi, gb in enumerate(gt_boxes):
            if gb is None:
                continue
            score = iou(pb, gb)
            if score >= threshold:
                candidates.append((-score, pi, gi))
    candidates.sort()
    used_pred, used_gt, pairs = set(), set(), []
    for _, pi, gi in candidates:
        if pi in used_pred or gi in used_gt:
            continue
        used_pred.add(pi)
        used_gt.add(gi)
        pairs.append((pi, gi))
    return pairs, len(gt_boxes) - len(used_gt)


def loss_comp(comp_logits, matched_pairs, gt_labels, n_unmatched_gt, n_categories):
    """Summed cross-entropy over matched components.

    Unmatched ground-truth components contribute the fixed uniform-logit
    penalty ln(n_categories) each (no gradient).
    """
    penalty = float(n_unmatched_gt) * math.log(max(n_categories, 1))
    if not matched_pairs:
        return T.const([[penalty]])
    total = None
    for pi, gi in matched_pairs:
        row = T.narrow(comp_logits, 0, pi, 1)
        ce = T.sub(T.logsumexp(row, axis=1, keepdims=True), T.narrow(row, 1, gt_labels[gi], 1))
        total = ce if total is None else T.add(total, ce)
    return T.add(total, T.const([[penalty]]))


def align_adjacency(a_true, matched_pairs, k_pred):
    """Project ground-truth adjacency onto predicted component indices.

    Entries involving unmatched predictions are zero (not adjacent).
    """
    aligned = np.zeros((k_pred, k_pred))
    for pi, gi in matched_pairs:
        for pj, gj in matched_pairs:
            aligned[pi, pj] = a_true[gi][gj]
    return aligned


def loss_struct(recomputed, stored_next, a_pred, a_true, beta):
    """Consistency of stored features with a recomputed step, plus the
    adjacency term. Returns (scalar tensor, adjacency_term_skipped)."""
    term = T.frobenius_sq(T.sub(recomputed, T.const(stored_next.data)))
    skipped = a_true is None
    if not skipped and beta != 0.0:
        term = T.add(term, T.scale(T.l1_norm(T.sub(T.const(a_true), a_pred)), beta))
    return term, skipped


def loss_sem(sem_logits, active):
    """Summed binary cross-entropy of per-concept logits against 0/1 targets."""
    y = T.const(np.asarray(active, dtype=np.float64).reshape(-1, 1))
    if y.data.shape != sem_logits.data.shape:
        from .errors import ShapeError

        raise ShapeError(f"semantic targets {y.data.shape} do not match logits {sem_logits.data.shape}")
    return T.sum_(T.sub(T.softplus(sem_logits), T.mul(y, sem_logits)))


_TERM_NAMES = ("char", "comp", "struct", "sem")


def loss_total(parts, weights):
    """Weighted sum of the four scalar terms; aborts on non-finite parts."""
    total = None
    for name in _TERM_NAMES:
        part = parts[name]
        value = float(part.data.reshape(()))
        if not math.isfinite(value):
            raise DivergenceError(f"loss term {name!r} is non-finite ({value})")
        w = getattr(weights, name)
        if w < 0:
            raise DataError(f"loss weight for {name!r} must be non-negative")
        weighted = T.scale(T.reshape(part, (1, 1)), w)
        total = weighted if total is None else T.add(total, weighted)
    return total
