"""Evaluation metrics: segmentation agreement, plane recall, parameter errors, 3D-plane AP, pose."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError
from .geometry import CameraIntrinsics, PoseSE3, plane_normal, plane_offset
from .matching import hungarian

DEPTH_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 13))  # metres
NORMAL_THRESHOLDS = tuple(2.5 * k for k in range(1, 13))  # degrees
IOU_THRESHOLD = 0.5
AP_TIERS = ((30.0, 1.0), (15.0, 0.5), (5.0, 0.2))  # (normal deg, offset m)
TRANS_THRESHOLDS = (1.0, 0.5, 0.2)
ROT_THRESHOLDS = (30.0, 15.0, 10.0)


# ---------------------------------------------------------------------------
# segmentation


def _contingency(a, b):
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"partitions differ in size: {a.size} vs {b.size}")
    if a.size == 0:
        raise ContractError("cannot compare empty partitions")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def variation_of_information(a, b) -> float:
    """``H(A) + H(B) - 2 I(A, B)`` in nats."""
    t = _contingency(a, b)
    n = t.sum()
    pij = t[t > 0] / n
    pa = t.sum(axis=1) / n
    pb = t.sum(axis=0) / n
    h_a = -float(np.sum(pa * np.log(pa)))
    h_b = -float(np.sum(pb * np.log(pb)))
    h_ab = -float(np.sum(pij * np.log(pij)))
    # H(A) + H(B) - 2 I = 2 H(A,B) - H(A) - H(B)
    return max(0.0, 2.0 * h_ab - h_a - h_b)


def _pairs(x):
    return x * (x - 1) // 2


def rand_index(a, b) -> float:
    """Fraction of element pairs on which both partitions agree, from integer counts."""
    t = _contingency(a, b)
    n = int(t.sum())
    total = _pairs(n)
    if total == 0:
        return 1.0
    same_both = int(_pairs(t).sum())
    same_a = int(_pairs(t.sum(axis=1)).sum())
    same_b = int(_pairs(t.sum(axis=0)).sum())
    agree = total + 2 * same_both - same_a - same_b
    return agree / total


def segmentation_covering(pred, gt) -> float:
    """``sum_g |g| / N * max_p IoU(g, p)``."""
    t = _contingency(gt, pred).astype(np.float64)
    g_size = t.sum(axis=1, keepdims=True)
    p_size = t.sum(axis=0, keepdims=True)
    iou = t / (g_size + p_size - t)
    return float(np.sum(g_size[:, 0] * iou.max(axis=1)) / t.sum())


def seg_metrics(pred, gt):
    """``(VI, RI, SC)`` of two label maps; background labels form their own segment."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"segmentation shapes differ: {pred.shape} vs {gt.shape}")
    return variation_of_information(pred, gt), rand_index(pred, gt), segmentation_covering(pred, gt)


# ---------------------------------------------------------------------------
# recall curves


@dataclass
class RecallCurve:
    kind: str  # "depth" or "normal"
    thresholds: tuple
    per_pixel: np.ndarray
    per_plane: np.ndarray

    def at(self, threshold: float, per_plane: bool = True) -> float:
        k = int(np.argmin(np.abs(np.asarray(self.thresholds) - threshold)))
        return float((self.per_plane if per_plane else self.per_pixel)[k])

    def to_dict(self):
        return {
            "kind": self.kind,
            "thresholds": list(self.thresholds),
            "per_pixel": self.per_pixel.tolist(),
            "per_plane": self.per_plane.tolist(),
        }


@dataclass
class PlaneMatchRecord:
    """Best admissible prediction errors for one ground-truth plane."""

    pixels: int
    depth_error: float  # inf when no prediction reaches the IoU threshold
    normal_error: float


def plane_errors(pred_seg, pred_params, gt_seg, gt_params, gt_depth, cam: CameraIntrinsics) -> list[PlaneMatchRecord]:
    """Per-gt-plane errors of the predictions whose mask IoU is at least 0.5.

    The depth error of a candidate is the mean absolute difference between
    its plane rendered on the gt mask and the gt depth; rays that miss the
    candidate plane count as an infinite error.
    """
    pred_seg = np.asarray(pred_seg)
    gt_seg = np.asarray(gt_seg)
    if pred_seg.shape != gt_seg.shape:
        raise ContractError("segmentation shapes differ")
    pred_params = np.asarray(pred_params, dtype=np.float64).reshape(-1, 3)
    gt_params = np.asarray(gt_params, dtype=np.float64).reshape(-1, 3)
    rays = cam.rays()
    out = []
    for g in range(len(gt_params)):
        gm = gt_seg == g
        size = int(gm.sum())
        best_d, best_n = np.inf, np.inf
        if size:
            for p in range(len(pred_params)):
                pm = pred_seg == p
                inter = int(np.sum(gm & pm))
                union = size + int(pm.sum()) - inter
                if union == 0 or inter / union < IOU_THRESHOLD:
                    continue
                nr = rays[gm] @ pred_params[p]
                if np.any(nr <= 1e-9):
                    d_err = np.inf
                else:
                    d_err = float(np.mean(np.abs(1.0 / nr - gt_depth[gm])))
                best_d = min(best_d, d_err)
                c = float(np.clip(plane_normal(pred_params[p]) @ plane_normal(gt_params[g]), -1.0, 1.0))
                best_n = min(best_n, float(np.degrees(np.arccos(c))))
        out.append(PlaneMatchRecord(size, best_d, best_n))
    return out


def recall_curves(records: list[PlaneMatchRecord]):
    """``(depth_curve, normal_curve)`` from pooled per-plane records."""
    recs = [r for r in records if r.pixels > 0]
    pixels = np.array([r.pixels for r in recs], dtype=np.float64)
    curves = []
    for kind, ths, attr in (("depth", DEPTH_THRESHOLDS, "depth_error"), ("normal", NORMAL_THRESHOLDS, "normal_error")):
        err = np.array([getattr(r, attr) for r in recs], dtype=np.float64)
        hit = err[None, :] <= np.asarray(ths)[:, None] if len(recs) else np.zeros((len(ths), 0), bool)
        per_plane = hit.mean(axis=1) if len(recs) else np.zeros(len(ths))
        per_pixel = (hit * pixels).sum(axis=1) / pixels.sum() if len(recs) else np.zeros(len(ths))
        curves.append(RecallCurve(kind, ths, per_pixel, per_plane))
    return tuple(curves)


def plane_recalls(preds, gts, cam: CameraIntrinsics):
    """Recall curves over a set of images.

    ``preds`` holds ``(segmentation, params)`` per image (e.g. from
    :func:`monocular_infer`), ``gts`` holds ``(segmentation, params, depth)``.
    """
    records = []
    for (ps, pp), (gs, gp, gd) in zip(preds, gts, strict=True):
        records += plane_errors(ps, pp, gs, gp, gd, cam)
    return recall_curves(records)


# ---------------------------------------------------------------------------
# plane parameters


def param_errors(pred_params, gt_params):
    """Mean normal angle (deg) and mean offset error (mm) after an L1 assignment."""
    P = np.asarray(pred_params, dtype=np.float64).reshape(-1, 3)
    G = np.asarray(gt_params, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(G) == 0:
        raise ContractError("need at least one predicted and one ground-truth plane")
    cost = np.abs(P[:, None, :] - G[None, :, :]).sum(axis=2)
    if len(P) <= len(G):
        pairs = hungarian(cost)
    else:
        pairs = [(r, c) for c, r in hungarian(cost.T)]
    ang, off = [], []
    for r, c in pairs:
        cos = float(np.clip(plane_normal(P[r]) @ plane_normal(G[c]), -1.0, 1.0))
        ang.append(np.degrees(np.arccos(cos)))
        off.append(abs(plane_offset(P[r]) - plane_offset(G[c])) * 1000.0)
    return float(np.mean(ang)), float(np.mean(off))


# ---------------------------------------------------------------------------
# 3D plane AP


@dataclass
class PlaneDetection:
    score: float
    view: int
    mask: np.ndarray  # (H, W) bool
    n: np.ndarray  # plane parameter in the evaluation frame


@dataclass
class GtPlaneInstance:
    view: int
    mask: np.ndarray
    n: np.ndarray


def average_precision(tp_flags, n_gt: int) -> Fraction:
    """Area under the precision envelope, all recall points, in exact arithmetic."""
    if n_gt == 0:
        return Fraction(0)
    prec, rec = [], []
    tp = 0
    for k, flag in enumerate(tp_flags, start=1):
        tp += int(bool(flag))
        prec.append(Fraction(tp, k))
        rec.append(Fraction(tp, n_gt))
    for k in range(len(prec) - 2, -1, -1):
        prec[k] = max(prec[k], prec[k + 1])
    ap = Fraction(0)
    last = Fraction(0)
    for p, r in zip(prec, rec):
        if r > last:
            ap += (r - last) * p
            last = r
    return ap


def _admissible(det: PlaneDetection, gt: GtPlaneInstance, normal_deg, offset_m):
    if det.view != gt.view:
        return None
    inter = int(np.sum(det.mask & gt.mask))
    union = int(np.sum(det.mask | gt.mask))
    if union == 0 or inter / union < IOU_THRESHOLD:
        return None
    if normal_deg is not None:
        c = float(np.clip(plane_normal(det.n) @ plane_normal(gt.n), -1.0, 1.0))
        if np.degrees(np.arccos(c)) > normal_deg:
            return None
    if offset_m is not None and abs(plane_offset(det.n) - plane_offset(gt.n)) > offset_m:
        return None
    return inter / union


def ap_flags(detections: list[PlaneDetection], gts: list[GtPlaneInstance], tier) -> list[bool]:
    """True-positive flags in score order; each detection takes the best free admissible gt."""
    normal_deg, offset_m = tier
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    used = set()
    flags = []
    for i in order:
        best, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if j in used:
                continue
            iou = _admissible(detections[i], gt, normal_deg, offset_m)
            if iou is not None and iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            used.add(best)
        flags.append(best is not None)
    return flags


def reconstruction_ap(detections: list[PlaneDetection], gts: list[GtPlaneInstance], tier=(30.0, 1.0)) -> float:
    """AP at ``tier = (normal deg, offset m)``; ``None`` drops that condition."""
    return float(average_precision(ap_flags(detections, gts, tier), len(gts)))


def pooled_ap(per_pair: list[tuple[list, list]], tier) -> float:
    """AP over many pairs: detections ranked jointly, matching stays within a pair."""
    scored, n_gt = [], 0
    for dets, gts in per_pair:
        flags = ap_flags(dets, gts, tier)
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        scored += [(dets[i].score, f) for i, f in zip(order, flags)]
        n_gt += len(gts)
    scored.sort(key=lambda sf: -sf[0])
    return float(average_precision([f for _, f in scored], n_gt))


# ---------------------------------------------------------------------------
# pose


@dataclass
class PoseStats:
    trans_median: float
    trans_mean: float
    rot_median: float
    rot_mean: float
    trans_pct: dict  # threshold (m) -> percent within
    rot_pct: dict  # threshold (deg) -> percent within

    def to_dict(self):
        d = asdict(self)
        d["trans_pct"] = {str(k): v for k, v in self.trans_pct.items()}
        d["rot_pct"] = {str(k): v for k, v in self.rot_pct.items()}
        return d


def rotation_error_deg(q_pred, q_gt) -> float:
    c = abs(float(np.dot(q_pred, q_gt)) / (np.linalg.norm(q_pred) * np.linalg.norm(q_gt)))
    return float(np.degrees(2.0 * np.arccos(min(1.0, c))))


def pose_stats_from_errors(trans_err, rot_err) -> PoseStats:
    te = np.asarray(trans_err, dtype=np.float64)
    re = np.asarray(rot_err, dtype=np.float64)
    if te.size == 0 or re.size == 0:
        raise ContractError("pose statistics need at least one pose")
    return PoseStats(
        float(np.median(te)), float(np.mean(te)), float(np.median(re)), float(np.mean(re)),
        {t: 100.0 * float(np.mean(te <= t)) for t in TRANS_THRESHOLDS},
        {t: 100.0 * float(np.mean(re <= t)) for t in ROT_THRESHOLDS},
    )


def pose_errors(pred: list[PoseSE3], gt: list[PoseSE3]):
    if len(pred) != len(gt):
        raise ContractError("pose lists differ in length")
    te = [float(np.linalg.norm(a.t - b.t)) for a, b in zip(pred, gt)]
    re = [rotation_error_deg(a.q, b.q) for a, b in zip(pred, gt)]
    return te, re


def pose_stats(pred: list[PoseSE3], gt: list[PoseSE3]) -> PoseStats:
    """Translation (relative-pose difference, m) and geodesic rotation (deg) statistics."""
    return pose_stats_from_errors(*pose_errors(pred, gt))
