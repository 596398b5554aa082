"""Decoding plane embeddings into per-query plane properties, and monocular inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ShapeError
from .geometry import CameraIntrinsics, depth_map_from_planes
from .matching import PlanePrediction

HEADS = ("cls", "param", "mask", "depth")
HEAD_OUT = {"cls": 1, "param": 3}


def init_plane_heads(params: dict, rng: dc.RngStream, channels: int, hidden_layers: int = 2) -> None:
    for name in HEADS:
        out = HEAD_OUT.get(name, channels)
        dc.init_mlp(params, rng.child(HEADS.index(name)), f"head.{name}", channels, channels, out, hidden_layers)


def decode_properties(g: dc.Graph, params: dict, E_plane: dc.Node, hidden_layers: int = 2) -> dict:
    """Four independent MLPs on the plane embeddings.

    Returns nodes ``p_logits (N,1)``, ``n (N,3)``, ``mask_emb (N,C)`` and
    ``depth_emb (N,C)``; the probability is ``sigmoid(p_logits)``.
    """
    C = params["head.cls.0.W"].shape[0]
    if E_plane.shape[1] != C:
        raise ShapeError(f"plane embeddings have {E_plane.shape[1]} channels, heads expect {C}")
    return {
        "p_logits": dc.mlp(g, params, "head.cls", E_plane, hidden_layers),
        "n": dc.mlp(g, params, "head.param", E_plane, hidden_layers),
        "mask_emb": dc.mlp(g, params, "head.mask", E_plane, hidden_layers),
        "depth_emb": dc.mlp(g, params, "head.depth", E_plane, hidden_layers),
    }


def decode_masks_depths(mask_emb: dc.Node, depth_emb: dc.Node, E_pixel_flat: dc.Node):
    """Mask logits and depth maps as dot products with the pixel embeddings.

    ``E_pixel_flat`` is ``(C, P)`` with ``P = H*W`` pixels.  Returns
    ``(mask_logits, depth)`` nodes of shape ``(N, P)``; masks are
    ``sigmoid(mask_logits)``.
    """
    if mask_emb.shape[1] != E_pixel_flat.shape[0] or depth_emb.shape[1] != E_pixel_flat.shape[0]:
        raise ShapeError("embedding channels do not match the pixel embedding")
    return mask_emb @ E_pixel_flat, depth_emb @ E_pixel_flat


def predictions_from_heads(values: dict, grid_shape) -> list[PlanePrediction]:
    """Numpy :class:`PlanePrediction` list from evaluated head nodes/arrays."""
    p = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(values["p_logits"]).reshape(-1)))
    n = np.asarray(values["n"])
    ml = np.asarray(values["mask_logits"])
    dp = np.asarray(values["depth"])
    return [
        PlanePrediction(float(p[i]), n[i].copy(), ml[i].reshape(grid_shape), dp[i].reshape(grid_shape))
        for i in range(len(p))
    ]


@dataclass
class MonocularResult:
    segmentation: np.ndarray  # (H, W) index into ``kept``, -1 = background
    kept: list[int]  # query indices of kept planes
    params: np.ndarray  # (K, 3)
    scores: np.ndarray  # (K,)
    depth: np.ndarray  # (H, W)
    invalid: np.ndarray  # (H, W) bool


def monocular_infer(preds: list[PlanePrediction], cam: CameraIntrinsics, p_keep: float = 0.5,
                    m_bg: float | None = 0.5) -> MonocularResult:
    """Drop non-plane queries, assign pixels to the most likely kept plane.

    Depth comes from the kept plane parameters and the segmentation; the
    per-query depth maps are not used.  ``m_bg=None`` disables background
    thresholding.
    """
    if not preds:
        raise ValueError("need at least one prediction")
    H, W = cam.height, cam.width
    kept = [i for i, pr in enumerate(preds) if pr.p > p_keep]
    seg = np.full((H, W), -1, dtype=np.int64)
    if kept:
        logits = np.stack([np.asarray(preds[i].mask_logits).reshape(H, W) for i in kept])
        best = logits.argmax(axis=0)
        seg = best.astype(np.int64)
        if m_bg is not None:
            winner = np.take_along_axis(logits, best[None], axis=0)[0]
            prob = 0.5 * (1.0 + np.tanh(0.5 * winner))
            seg[prob < m_bg] = -1
    params = np.array([preds[i].n for i in kept], dtype=np.float64).reshape(-1, 3)
    scores = np.array([preds[i].p for i in kept], dtype=np.float64)
    depth, invalid = depth_map_from_planes(seg, params, cam)
    return MonocularResult(seg, kept, params, scores, depth, invalid)
