"""Training objectives.

Each loss exists twice: a plain numpy function (evaluation, reference values)
and a ``*_graph`` builder that records the same arithmetic on a
:class:`~planequery.diffcore.Graph` for training.  Tests tie the two together.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .geometry import PoseSE3, quat_conj, quat_mul, se3_compose, se3_inverse, se3_log
from .matching import DICE_EPS, LOGIT_CLAMP, GtPlane, PlanePrediction, bipartite_match, cost_matrix


@dataclass(frozen=True)
class LossWeights:
    lam: float = 2.0  # cls and depth multiplier in the monocular objective
    beta_ce: float = 5.0
    beta_dice: float = 5.0
    lam_t: float = 5.0
    lam_q: float = 15.0
    w_noplane: float = 0.1
    mono_scale_joint: float = 0.1

    def to_dict(self):
        return asdict(self)


def _prob_to_logit(m):
    lo = 1.0 / (1.0 + np.exp(LOGIT_CLAMP))
    m = np.clip(np.asarray(m, dtype=np.float64), lo, 1.0 - lo)
    return np.log(m) - np.log1p(-m)


def _bce_logits(x, y):
    x = np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)
    return np.logaddexp(0.0, x) - x * y


# ---------------------------------------------------------------------------
# numpy reference losses


def mask_loss(m, gt_mask, weights: LossWeights = LossWeights(), logits: bool = False) -> float:
    """Weighted BCE + dice between a soft mask (or its logits) and a binary mask."""
    x = np.asarray(m, dtype=np.float64).reshape(-1)
    if not logits:
        x = _prob_to_logit(x)
    x = np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)
    y = np.asarray(gt_mask, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("mask shapes differ")
    prob = 0.5 * (1.0 + np.tanh(0.5 * x))
    ce = _bce_logits(x, y).mean()
    dice = 1.0 - 2.0 * (prob * y).sum() / (prob.sum() + y.sum() + DICE_EPS)
    return float(weights.beta_ce * ce + weights.beta_dice * dice)


def depth_loss(d, gt_depth, gt_mask) -> float:
    y = np.asarray(gt_mask, dtype=bool).reshape(-1)
    if not y.any():
        return 0.0
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
    return float(np.abs(d[y] - gt[y]).mean())


def cls_loss(p, assignment, weights: LossWeights = LossWeights(), logits: bool = False) -> float:
    """Summed BCE: target 1 for queries owning a real plane, 0 (down-weighted) otherwise."""
    x = np.asarray(p, dtype=np.float64).reshape(-1)
    if not logits:
        x = _prob_to_logit(x)
    y = np.zeros_like(x)
    for r, _ in assignment:
        y[r] = 1.0
    w = np.where(y > 0, 1.0, weights.w_noplane)
    return float((w * _bce_logits(x, y)).sum())


def param_loss(n, gt_n, assignment) -> float:
    """Mean over matched planes of the L1 distance between plane parameters."""
    if not assignment:
        return 0.0
    n = np.asarray(n, dtype=np.float64)
    gt_n = np.asarray(gt_n, dtype=np.float64)
    return float(np.mean([np.abs(n[r] - gt_n[c]).sum() for r, c in assignment]))


@dataclass
class MonoLossTerms:
    cls: float
    param: float
    mask: float
    depth: float
    total: float


def total_mono_loss(preds: list[PlanePrediction], gts: list[GtPlane], weights: LossWeights = LossWeights(),
                    assignment=None) -> MonoLossTerms:
    """Monocular objective summed over matched ground-truth planes."""
    if assignment is None:
        assignment = bipartite_match(preds, gts)
    M = len(assignment)
    cls = cls_loss([pr.p for pr in preds], assignment, weights)
    param = param_loss([pr.n for pr in preds], [gt.n for gt in gts], assignment) * M
    mask = sum(mask_loss(preds[r].mask_logits, gts[c].mask, weights, logits=True) for r, c in assignment)
    depth = sum(depth_loss(preds[r].depth, gts[c].depth, gts[c].mask) for r, c in assignment)
    total = weights.lam * cls + param + mask + weights.lam * depth
    return MonoLossTerms(cls, param, float(mask), float(depth), float(total))


def pose_geodesic(T: PoseSE3, T_gt: PoseSE3) -> np.ndarray:
    return se3_log(se3_compose(se3_inverse(T), T_gt))


def pose_loss(T: PoseSE3, T_gt: PoseSE3, weights: LossWeights = LossWeights()) -> float:
    G = pose_geodesic(T, T_gt)
    return float(weights.lam_t * np.linalg.norm(G[:3]) + weights.lam_q * np.linalg.norm(G[3:]))


# ---------------------------------------------------------------------------
# graph builders


@dataclass
class ViewTargets:
    """Ground truth of one view, flattened to ``P`` pixels."""

    n: np.ndarray  # (M, 3)
    masks: np.ndarray  # (M, P) bool
    depth: np.ndarray  # (M, P)

    @property
    def count(self) -> int:
        return len(self.n)


def match_view(p_logits, n, mask_logits, depth, targets: ViewTargets):
    """Bipartite assignment from the current (numpy) head outputs."""
    N = len(p_logits)
    if targets.count > N:
        raise ValueError("more ground-truth planes than queries")
    p = 0.5 * (1.0 + np.tanh(0.5 * np.clip(p_logits.reshape(-1), -LOGIT_CLAMP, LOGIT_CLAMP)))
    C = cost_matrix(p, n, mask_logits, depth, targets.n, targets.masks, targets.depth)
    return bipartite_match(C[:, : targets.count])


def mono_loss_graph(g: dc.Graph, heads: dict, targets: ViewTargets, assignment,
                    weights: LossWeights = LossWeights()):
    """Record the monocular objective for one view.

    ``heads`` holds nodes ``p_logits (N,1)``, ``n (N,3)``, ``mask_logits (N,P)``
    and ``depth (N,P)``.  Returns ``(total, terms)`` with ``terms`` a dict of
    the four summed sub-loss nodes.
    """
    N = heads["p_logits"].shape[0]
    P = heads["mask_logits"].shape[1]
    y = np.zeros((N, 1))
    for r, _ in assignment:
        y[r, 0] = 1.0
    w = np.where(y > 0, 1.0, weights.w_noplane)
    x = dc.clamp(heads["p_logits"], -LOGIT_CLAMP, LOGIT_CLAMP)
    bce = dc.softplus(x) - x * g.const(y)
    cls = dc.sum_(bce * g.const(w))
    terms = {"cls": cls}
    if assignment:
        M = len(assignment)
        sel = np.zeros((M, N))
        cols = []
        for k, (r, c) in enumerate(assignment):
            sel[k, r] = 1.0
            cols.append(c)
        S = g.const(sel)
        gt_n = targets.n[cols]
        gt_mask = targets.masks[cols].astype(np.float64)
        gt_depth = targets.depth[cols] * gt_mask
        cnt = gt_mask.sum(axis=1, keepdims=True)
        depth_w = np.where(cnt > 0, gt_mask / np.maximum(cnt, 1.0), 0.0)

        terms["param"] = dc.sum_(dc.abs_(S @ heads["n"] - g.const(gt_n)))

        xm = dc.clamp(S @ heads["mask_logits"], -LOGIT_CLAMP, LOGIT_CLAMP)
        Y = g.const(gt_mask)
        ce_rows = dc.sum_(dc.softplus(xm) - xm * Y, axis=1) * (1.0 / P)
        prob = dc.sigmoid(xm)
        inter = dc.sum_(prob * Y, axis=1)
        denom = dc.sum_(prob, axis=1) + g.const(gt_mask.sum(axis=1) + DICE_EPS)
        dice_rows = 1.0 - (inter * 2.0) / denom
        terms["mask"] = dc.sum_(ce_rows * weights.beta_ce + dice_rows * weights.beta_dice)

        diff = dc.abs_(S @ heads["depth"] - g.const(gt_depth))
        terms["depth"] = dc.sum_(diff * g.const(depth_w))
    else:
        zero = g.const(np.zeros(()))
        terms["param"] = terms["mask"] = terms["depth"] = zero
    total = (
        terms["cls"] * weights.lam + terms["param"] + terms["mask"] + terms["depth"] * weights.lam
    )
    return total, terms


def _cross(a, b):
    """Cross product of two 1x3 nodes."""
    a0, a1, a2 = (dc.slice_(a, i, i + 1) for i in range(3))
    b0, b1, b2 = (dc.slice_(b, i, i + 1) for i in range(3))
    return dc.concat(a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0)


def _right_mul_matrix(b) -> np.ndarray:
    """Matrix ``M`` with ``quat_mul(a, b) == M @ a``."""
    return np.stack([quat_mul(e, b) for e in np.eye(4)], axis=1)


_SQRT_FLOOR = 1e-24


def pose_loss_graph(g: dc.Graph, q, t, T_gt: PoseSE3, weights: LossWeights = LossWeights()):
    """Geodesic pose loss for a predicted unit quaternion ``q (1,4)`` and ``t (1,3)``.

    Computes ``Log(T^-1 T_gt)`` from primitive ops: relative rotation
    ``conj(q) * q_gt`` (linear in ``q``), relative translation
    ``R(q)^T (t_gt - t)``, then the closed-form SE(3) logarithm.
    """
    conj = np.diag([1.0, -1.0, -1.0, -1.0])
    A = conj.T @ _right_mul_matrix(T_gt.q).T  # row-vector form: rel = q @ A
    rel_q = q @ g.const(A)
    sign = 1.0 if rel_q.value[0, 0] >= 0 else -1.0
    rel_q = rel_q * sign
    w = dc.slice_(rel_q, 0, 1)
    v = dc.slice_(rel_q, 1, 4)

    # rotate (t_gt - t) by conj(q): x + 2 w u' x (x) + 2 u' x (u' x x), u' = -u
    x = g.const(T_gt.t.reshape(1, 3)) - t
    qw = dc.slice_(q, 0, 1)
    u = -dc.slice_(q, 1, 4)
    ux = _cross(u, x)
    rel_t = x + (qw @ ux) * 2.0 + _cross(u, ux) * 2.0

    nv = dc.sqrt(v @ v.T + _SQRT_FLOOR)
    theta = dc.atan2(nv, w) * 2.0
    phi = (theta / nv) @ v
    px = _cross(phi, rel_t)
    coef = g.op("so3_vinv_coef", theta)
    rho = rel_t - px * 0.5 + coef @ _cross(phi, px)
    rho_norm = dc.sqrt(rho @ rho.T + _SQRT_FLOOR)
    loss = rho_norm * weights.lam_t + theta * weights.lam_q
    return dc.reshape(loss, ())
