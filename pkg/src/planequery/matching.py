"""Set matching between predictions and ground truth, and cross-view plane pairing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import _softmax
from .errors import ContractError, ShapeError

# matching-cost weights: -w1 p + w2 L1(n) + w3 L1(depth) + w4 BCE + w5 dice
COST_WEIGHTS = (2.0, 1.0, 2.0, 5.0, 5.0)
LOGIT_CLAMP = 15.0
DICE_EPS = 1e-6


# ---------------------------------------------------------------------------
# linear assignment


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment by shortest augmenting paths, O(n^2 m).

    Accepts an ``n x m`` matrix with ``n <= m``; every row is assigned.
    Returns ``(row, col)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError("cost matrix must be 2-d")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        return sorted((r, c) for c, r in hungarian(cost.T))
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    owner = [0] * (m + 1)  # owner[j] = row (1-based) assigned to column j
    way = [0] * (m + 1)
    rows = cost.tolist()
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = rows[i0 - 1]
            delta = INF
            j1 = 0
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return sorted((owner[j] - 1, j - 1) for j in range(1, m + 1) if owner[j])


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost)
    return float(sum(cost[r, c] for r, c in pairs))


# ---------------------------------------------------------------------------
# prediction / ground-truth containers


@dataclass
class PlanePrediction:
    """One query's decoded plane: probability, parameter, mask logits, depth."""

    p: float
    n: np.ndarray
    mask_logits: np.ndarray
    depth: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * self.mask_logits))


@dataclass
class GtPlane:
    n: np.ndarray
    mask: np.ndarray  # bool, same shape as the predicted mask
    depth: np.ndarray  # metres; only read inside ``mask``
    instance: int = -1


def _bce_logits(x, y):
    x = np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)
    return np.logaddexp(0.0, x) - x * y


def matching_cost(pred: PlanePrediction, gt: GtPlane | None) -> float:
    """Cost of assigning ``pred`` to ``gt``; a non-plane slot (``None``) costs 0."""
    if gt is None:
        return 0.0
    w1, w2, w3, w4, w5 = COST_WEIGHTS
    y = gt.mask.astype(np.float64).reshape(-1)
    x = np.asarray(pred.mask_logits, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError("prediction and ground-truth grids differ")
    m = 0.5 * (1.0 + np.tanh(0.5 * np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)))
    ce = _bce_logits(x, y).mean()
    dice = 1.0 - 2.0 * (m * y).sum() / (m.sum() + y.sum() + DICE_EPS)
    n_pix = y.sum()
    d_err = 0.0
    if n_pix > 0:
        d_err = (np.abs(pred.depth.reshape(-1) - gt.depth.reshape(-1)) * y).sum() / n_pix
    l1_n = np.abs(np.asarray(pred.n) - np.asarray(gt.n)).sum()
    return float(-w1 * pred.p + w2 * l1_n + w3 * d_err + w4 * ce + w5 * dice)


def cost_matrix(p, n, mask_logits, depth, gt_n, gt_masks, gt_depth, n_slots: int | None = None) -> np.ndarray:
    """Vectorised :func:`matching_cost` for all query/ground-truth pairs.

    Shapes: ``p (N,)``, ``n (N,3)``, ``mask_logits/depth (N,P)``,
    ``gt_n (M,3)``, ``gt_masks/gt_depth (M,P)``.  Columns ``M..n_slots-1`` are
    zero-cost non-plane slots.
    """
    N = len(p)
    M = len(gt_n)
    n_slots = N if n_slots is None else n_slots
    out = np.zeros((N, n_slots))
    if M == 0:
        return out
    w1, w2, w3, w4, w5 = COST_WEIGHTS
    x = np.clip(mask_logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    y = gt_masks.astype(np.float64)
    P = x.shape[1]
    m = 0.5 * (1.0 + np.tanh(0.5 * x))
    ce = (np.logaddexp(0.0, x).sum(axis=1, keepdims=True) - x @ y.T) / P
    dice = 1.0 - 2.0 * (m @ y.T) / (m.sum(axis=1, keepdims=True) + y.sum(axis=1)[None, :] + DICE_EPS)
    cnt = y.sum(axis=1)
    err = np.abs(depth[:, None, :] - gt_depth[None, :, :]) * y[None, :, :]
    d_err = np.where(cnt > 0, err.sum(axis=2) / np.maximum(cnt, 1.0), 0.0)
    l1_n = np.abs(n[:, None, :] - gt_n[None, :, :]).sum(axis=2)
    out[:, :M] = -w1 * p[:, None] + w2 * l1_n + w3 * d_err + w4 * ce + w5 * dice
    return out


def bipartite_match(cost_or_preds, gts=None) -> list[tuple[int, int]]:
    """Assign ground-truth planes to predictions (``pred_index, gt_index``).

    Either pass a precomputed ``N x M`` cost matrix, or a list of
    :class:`PlanePrediction` plus a list of :class:`GtPlane`.  Ground truth is
    padded with zero-cost non-plane slots up to ``N``.
    """
    if gts is None:
        C = np.asarray(cost_or_preds, dtype=np.float64)
        N, M = C.shape
    else:
        preds = cost_or_preds
        N, M = len(preds), len(gts)
        C = np.array([[matching_cost(pr, gt) for gt in gts] for pr in preds]).reshape(N, M)
    if N < M:
        raise ContractError(f"fewer predictions ({N}) than ground-truth planes ({M})")
    if M == 0:
        return []
    square = np.zeros((N, N))
    square[:, :M] = C
    return sorted((r, c) for r, c in hungarian(square) if c < M)


# ---------------------------------------------------------------------------
# cross-view correspondence


@dataclass
class CorrespondenceMatrix:
    C: np.ndarray
    S: np.ndarray
    scale: float

    def reconstruct(self) -> np.ndarray:
        return dual_softmax_from_similarity(self.S, self.scale)


def dual_softmax_from_similarity(S, scale) -> np.ndarray:
    Z = np.asarray(S, dtype=np.float64) * scale
    return _softmax(Z, 1) * _softmax(Z, 0)


def dual_softmax(Q, K) -> CorrespondenceMatrix:
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ShapeError(f"dual_softmax: incompatible shapes {Q.shape} and {K.shape}")
    S = Q @ K.T
    scale = 1.0 / math.sqrt(Q.shape[1])
    return CorrespondenceMatrix(dual_softmax_from_similarity(S, scale), S, scale)


def mnn_filter(C, theta: float = 0.1) -> list[tuple[int, int]]:
    """Mutual-nearest-neighbour pairs with probability at least ``theta``."""
    C = np.asarray(C.C if isinstance(C, CorrespondenceMatrix) else C, dtype=np.float64)
    if C.size == 0:
        return []
    row_best = C.argmax(axis=1)
    col_best = C.argmax(axis=0)
    return [
        (m, int(n))
        for m, n in enumerate(row_best)
        if col_best[n] == m and C[m, n] >= theta
    ]


def correspondence_prf(pred, gt):
    """``(precision, recall, f_score, tp)`` of predicted pairs against true pairs."""
    pred = set(map(tuple, pred))
    gt = set(map(tuple, gt))
    tp = len(pred & gt)
    precision = tp / len(pred) if pred else 0.0
    recall = tp / len(gt) if gt else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f, tp
