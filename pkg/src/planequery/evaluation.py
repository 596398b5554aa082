"""Running predictors over a dataset split and assembling metric reports."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DegeneratePlaneError
from .geometry import PoseSE3, fuse_planes, plane_transform, se3_inverse
from .losses import ViewTargets, match_view, pose_loss
from .matching import correspondence_prf, mnn_filter
from .metrics import (
    AP_TIERS,
    GtPlaneInstance,
    PlaneDetection,
    plane_errors,
    pooled_ap,
    pose_errors,
    pose_stats_from_errors,
    recall_curves,
    seg_metrics,
    param_errors,
)
from .model import ModelConfig, forward_pair, head_values
from .planehead import monocular_infer, predictions_from_heads
from .training import PairData

GT_LOGIT = 30.0


@dataclass
class PairPrediction:
    heads: tuple  # per view: dict of numpy arrays p_logits, n, mask_logits, depth
    pose: PoseSE3  # predicted T21
    C12: np.ndarray  # correspondence probabilities, queries of view 1 x view 2


def model_predictor(params: dict, cfg: ModelConfig, average_directions: bool = False):
    """Predictor running the model; optionally report (C12 + C21^T) / 2 as the correspondence."""

    def predict(pair: PairData) -> PairPrediction:
        g = dc.Graph()
        v1, v2, pose = forward_pair(g, params, cfg, pair.raw[0], pair.raw[1])
        C = 0.5 * (pose.C12 + pose.C21.T) if average_directions else pose.C12.copy()
        return PairPrediction((head_values(v1), head_values(v2)), pose.pose, C)

    return predict


def gt_predictor(pair: PairData) -> PairPrediction:
    """Ground truth dressed up as a prediction (one query per gt plane)."""
    heads = []
    for tg in pair.targets:
        M = tg.count
        heads.append({
            "p_logits": np.full((M, 1), GT_LOGIT),
            "n": tg.n.copy(),
            "mask_logits": np.where(tg.masks, GT_LOGIT, -GT_LOGIT),
            "depth": tg.depth * tg.masks,
        })
    C = np.zeros((pair.targets[0].count, pair.targets[1].count))
    for a, b in pair.sample.correspondence:
        C[a, b] = 1.0
    return PairPrediction(tuple(heads), pair.relative, C)


def identity_predictor(base):
    """Wrap a predictor, replacing its pose with the identity."""

    def predict(pair: PairData) -> PairPrediction:
        out = base(pair)
        return PairPrediction(out.heads, PoseSE3.identity(), out.C12)

    return predict


# ---------------------------------------------------------------------------
# correspondence bookkeeping


def gt_query_pairs(heads, targets: tuple[ViewTargets, ViewTargets], correspondence):
    """True query pairs: queries assigned to the two sides of a gt plane correspondence."""
    owner = []
    for h, tg in zip(heads, targets):
        a = match_view(h["p_logits"], h["n"], h["mask_logits"], h["depth"], tg)
        owner.append({c: r for r, c in a})
    return [(owner[0][a], owner[1][b]) for a, b in correspondence if a in owner[0] and b in owner[1]]


def kept_queries(h, p_keep=0.5):
    p = 0.5 * (1.0 + np.tanh(0.5 * h["p_logits"].reshape(-1)))
    return [i for i in range(len(p)) if p[i] > p_keep]


def predicted_query_pairs(C, kept1, kept2, theta):
    if not kept1 or not kept2:
        return []
    sub = C[np.ix_(kept1, kept2)]
    return [(kept1[a], kept2[b]) for a, b in mnn_filter(sub, theta)]


def random_query_pairs(rng: dc.RngStream, idx1, idx2):
    """Uniformly random injective matching between two query index lists."""
    k = min(len(idx1), len(idx2))
    if k == 0:
        return []
    if len(idx1) <= len(idx2):
        cols = rng.permutation(len(idx2))[:k]
        return [(idx1[i], idx2[int(c)]) for i, c in enumerate(cols)]
    rows = rng.permutation(len(idx1))[:k]
    return [(idx1[int(r)], idx2[j]) for j, r in enumerate(rows)]


def _prf_from_counts(tp, n_pred, n_gt):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"precision": p, "recall": r, "f_score": f, "tp": tp, "n_pred": n_pred, "n_gt": n_gt}


# ---------------------------------------------------------------------------
# reconstruction


def pair_detections(pair: PairData, pred: PairPrediction, preds_v, infer_v, theta):
    """Scored per-view plane detections with geometry in the view-1 frame."""
    kept = (infer_v[0].kept, infer_v[1].kept)
    pairs = predicted_query_pairs(pred.C12, list(kept[0]), list(kept[1]), theta)
    fused, _ = fuse_planes(
        [(a, preds_v[0][a].n, b, preds_v[1][b].n) for a, b in pairs], pred.pose
    )
    geom = {}
    for f in fused:
        geom[(0, f.index1)] = f.n
        geom[(1, f.index2)] = f.n
    T12 = se3_inverse(pred.pose)
    dets = []
    for v in (0, 1):
        res = infer_v[v]
        for k, q in enumerate(res.kept):
            mask = res.segmentation == k
            if not mask.any():
                continue
            n = geom.get((v, q))
            if n is None:
                n = preds_v[v][q].n
                if v == 1:
                    try:
                        n = plane_transform(n, T12)
                    except DegeneratePlaneError:
                        continue
            dets.append(PlaneDetection(float(preds_v[v][q].p), v, mask, np.asarray(n, dtype=np.float64)))
    return dets


def pair_gt_instances(pair: PairData) -> list[GtPlaneInstance]:
    T12 = se3_inverse(pair.relative)
    out = []
    for v, gt in enumerate(pair.sample.views):
        masks = gt.masks()
        for k in range(len(gt.instances)):
            n = gt.params[k] if v == 0 else plane_transform(gt.params[k], T12)
            out.append(GtPlaneInstance(v, masks[k], n))
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate(pairs: list[PairData], predictor, theta: float = 0.1, thetas=(0.05, 0.1, 0.2, 0.3, 0.5),
             random_seed: int = 0, random_draws: int = 100, tiers=AP_TIERS, p_keep: float = 0.5) -> dict:
    """Metric report for ``predictor`` over ``pairs``.

    Correspondence scores are pooled over pairs (micro averages).  Predicted
    pairs are mutual nearest neighbours among the kept queries; the random
    baseline redraws ``random_draws`` injective matchings over all query slots
    per pair.
    """
    seg_vals, recall_records, param_vals = [], [], []
    pose_pred, pose_gt, pose_losses = [], [], []
    corr = {t: [0, 0, 0] for t in thetas}
    rand = [0, 0, 0]
    ap_pairs = []
    for idx, pair in enumerate(pairs):
        pred = predictor(pair)
        cam = pair.sample.cam
        grid = (cam.height, cam.width)
        preds_v, infer_v = [], []
        for v in (0, 1):
            pv = predictions_from_heads(pred.heads[v], grid)
            res = monocular_infer(pv, cam, p_keep=p_keep)
            gt = pair.sample.views[v]
            preds_v.append(pv)
            infer_v.append(res)
            seg_vals.append(seg_metrics(res.segmentation, gt.seg))
            recall_records += plane_errors(res.segmentation, res.params, gt.seg, gt.params, gt.depth, cam)
            if len(res.params) and len(gt.params):
                param_vals.append(param_errors(res.params, gt.params))
        pose_pred.append(pred.pose)
        pose_gt.append(pair.relative)
        pose_losses.append(pose_loss(pred.pose, pair.relative))

        true_pairs = gt_query_pairs(pred.heads, pair.targets, pair.sample.correspondence)
        k1, k2 = infer_v[0].kept, infer_v[1].kept
        for t in thetas:
            pp = predicted_query_pairs(pred.C12, k1, k2, t)
            _, _, _, tp = correspondence_prf(pp, true_pairs)
            c = corr[t]
            c[0] += tp
            c[1] += len(pp)
            c[2] += len(true_pairs)
        rng = dc.RngStream(random_seed, 303, idx)
        all1, all2 = list(range(pred.C12.shape[0])), list(range(pred.C12.shape[1]))
        for _ in range(random_draws):
            rp = random_query_pairs(rng, all1, all2)
            _, _, _, tp = correspondence_prf(rp, true_pairs)
            rand[0] += tp
            rand[1] += len(rp)
            rand[2] += len(true_pairs)
        ap_pairs.append((pair_detections(pair, pred, preds_v, infer_v, theta), pair_gt_instances(pair)))

    te, re = pose_errors(pose_pred, pose_gt)
    stats = pose_stats_from_errors(te, re)
    depth_curve, normal_curve = recall_curves(recall_records)
    seg = np.array(seg_vals)
    report = {
        "n_pairs": len(pairs),
        "segmentation": {"VI": float(seg[:, 0].mean()), "RI": float(seg[:, 1].mean()), "SC": float(seg[:, 2].mean())},
        "recall": {"depth": depth_curve.to_dict(), "normal": normal_curve.to_dict()},
        "plane_recall_0.6m": depth_curve.at(0.6),
        "params": {
            "normal_deg": float(np.mean([p[0] for p in param_vals])) if param_vals else None,
            "offset_mm": float(np.mean([p[1] for p in param_vals])) if param_vals else None,
            "views_with_planes": len(param_vals),
        },
        "pose": stats.to_dict(),
        "pose_loss": float(np.mean(pose_losses)),
        "correspondence": {str(t): _prf_from_counts(*corr[t]) for t in thetas},
        "correspondence_theta": theta,
        "random_matching": _prf_from_counts(*rand),
        "ap": {f"{a:g}deg_{b:g}m": pooled_ap(ap_pairs, (a, b)) for a, b in tiers},
    }
    if theta not in corr:
        raise ValueError("theta must be one of the swept thresholds")
    report["f_score"] = report["correspondence"][str(theta)]["f_score"]
    return report


def format_report(report: dict) -> str:
    """Plain-text tables in the usual benchmark layout."""
    p = report["pose"]
    lines = [
        f"pairs: {report['n_pairs']}",
        "",
        "Relative pose          | median | mean  | <=1m  | <=0.5m | <=0.2m",
        f"translation (m)        | {p['trans_median']:6.3f} | {p['trans_mean']:5.3f} | "
        + " | ".join(f"{p['trans_pct'][str(t)]:5.1f}" for t in (1.0, 0.5, 0.2)),
        "                       | median | mean  | <=30  | <=15   | <=10",
        f"rotation (deg)         | {p['rot_median']:6.2f} | {p['rot_mean']:5.2f} | "
        + " | ".join(f"{p['rot_pct'][str(t)]:5.1f}" for t in (30.0, 15.0, 10.0)),
        f"pose loss              | {report['pose_loss']:.4f}",
        "",
        "Correspondence  theta | P      | R      | F",
    ]
    for t, c in report["correspondence"].items():
        lines.append(f"                {float(t):5.2f} | {c['precision']:.4f} | {c['recall']:.4f} | {c['f_score']:.4f}")
    r = report["random_matching"]
    lines.append(f"random matching       | {r['precision']:.4f} | {r['recall']:.4f} | {r['f_score']:.4f}")
    lines += ["", "3D plane AP   " + " | ".join(report["ap"].keys())]
    lines.append("              " + " | ".join(f"{v:.4f}" for v in report["ap"].values()))
    s = report["segmentation"]
    lines += ["", f"segmentation  VI {s['VI']:.4f} | RI {s['RI']:.4f} | SC {s['SC']:.4f}"]
    lines.append(f"plane recall @0.6m (IoU 0.5): {report['plane_recall_0.6m']:.4f}")
    pe = report["params"]
    if pe["normal_deg"] is not None:
        lines.append(f"plane params  normal {pe['normal_deg']:.2f} deg | offset {pe['offset_mm']:.1f} mm")
    return "\n".join(lines)
