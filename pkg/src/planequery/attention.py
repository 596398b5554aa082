"""Cross attention between plane embeddings and pose regression.

``mca``  multi-head scaled dot-product cross attention.
``pca``  plane-aware bilinear cross attention: an unsplit query/key pair yields
         one dual-softmax correspondence matrix ``C`` that every value head
         contracts against, ``(v_i^h)^T C v_j^h``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ShapeError
from .geometry import PoseSE3


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 64
    v_heads: int = 4
    qk_heads: int = 1
    cross_embeddings: bool = True

    def __post_init__(self):
        if self.channels % self.v_heads:
            raise ConfigError(f"channels ({self.channels}) not divisible by value heads ({self.v_heads})")
        if self.qk_heads not in (1, self.v_heads):
            raise ConfigError("qk_heads must be 1 (unsplit) or equal to v_heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.v_heads

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        return (self.v_heads, self.head_dim, self.head_dim)

    def to_dict(self):
        return asdict(self)


ABLATIONS = ("full", "no_ce", "qk_split", "v1")


def ablation_variants(cfg: AttentionConfig) -> dict[str, AttentionConfig]:
    """The full configuration and its three single-axis ablations.

    ``no_ce`` feeds both bilinear sides from the same image, ``qk_split`` gives
    every value head its own query/key pair and dual softmax, ``v1`` collapses
    the value heads to one.  Raises ConfigError for combinations that cannot
    be built (e.g. ``qk_split`` with a single value head).
    """
    if cfg.v_heads == 1:
        raise ConfigError("the QK-split ablation needs more than one value head")
    return {
        "full": cfg,
        "no_ce": replace(cfg, cross_embeddings=False),
        "qk_split": replace(cfg, qk_heads=cfg.v_heads),
        "v1": replace(cfg, v_heads=1, qk_heads=1),
    }


# ---------------------------------------------------------------------------
# standard cross attention


def init_mca(params: dict, rng: dc.RngStream, prefix: str, channels: int) -> None:
    for i, part in enumerate(("q", "k", "v", "o")):
        dc.init_linear(params, rng.child(i), f"{prefix}.{part}", channels, channels)


def mca(g: dc.Graph, params: dict, prefix: str, Xq: dc.Node, Xkv: dc.Node, heads: int) -> dc.Node:
    """``Linear(Concat_h softmax(q^h k^h^T / sqrt(C/heads)) v^h)``."""
    C = Xq.shape[1]
    if Xkv.shape[1] != C or C % heads:
        raise ShapeError(f"mca: incompatible inputs {Xq.shape}, {Xkv.shape} with {heads} heads")
    Q = dc.linear(g, params, f"{prefix}.q", Xq)
    K = dc.linear(g, params, f"{prefix}.k", Xkv)
    V = dc.linear(g, params, f"{prefix}.v", Xkv)
    d = C // heads
    scale = 1.0 / math.sqrt(d)
    if heads == 1:
        return dc.linear(g, params, f"{prefix}.o", dc.row_softmax((Q @ K.T) * scale) @ V)
    # heads as column masks on the small query side, so the key/value
    # tensors (often one row per pixel) are never sliced
    Kt = K.T
    out = None
    for h in range(heads):
        mask = np.zeros((1, C))
        mask[0, h * d : (h + 1) * d] = 1.0
        row_mask = g.const(np.broadcast_to(mask, Q.shape))
        A = dc.row_softmax(((Q * row_mask) @ Kt) * scale)
        part = (A @ V) * g.const(np.broadcast_to(mask, (Xq.shape[0], C)))
        out = part if out is None else out + part
    return dc.linear(g, params, f"{prefix}.o", out)


# ---------------------------------------------------------------------------
# plane-aware cross attention


def dual_softmax_graph(g: dc.Graph, Q: dc.Node, K: dc.Node):
    """Record ``C = softmax_row(S/sqrt(c)) * softmax_col(S/sqrt(c))`` with ``S = Q K^T``."""
    if Q.shape[1] != K.shape[1]:
        raise ShapeError("dual_softmax: query/key channel mismatch")
    S = Q @ K.T
    Z = S * (1.0 / math.sqrt(Q.shape[1]))
    return dc.row_softmax(Z) * dc.col_softmax(Z), S


def init_pca(params: dict, rng: dc.RngStream, prefix: str, cfg: AttentionConfig) -> None:
    c = cfg.channels
    for i, part in enumerate(("q", "k", "vl", "vr")):
        dc.init_linear(params, rng.child(i), f"{prefix}.{part}", c, c)
    flat = cfg.v_heads * cfg.head_dim * cfg.head_dim
    dc.init_linear(params, rng.child(9), f"{prefix}.o", flat, c)


@dataclass
class PcaOutput:
    feature: dc.Node  # (1, v_heads * d * d), laid out as (d, v_heads*d) row-major
    projected: dc.Node  # (1, C)
    C: list  # correspondence nodes, one per qk head
    S: list  # raw similarity nodes

    def feature_map(self, cfg: AttentionConfig) -> np.ndarray:
        """PoseFeature as an ``(v_heads, d, d)`` array."""
        d = cfg.head_dim
        m = self.feature.value.reshape(d, cfg.v_heads, d)
        return np.transpose(m, (1, 0, 2)).copy()


def pca(g: dc.Graph, params: dict, prefix: str, E_i: dc.Node, E_j: dc.Node, cfg: AttentionConfig) -> PcaOutput:
    """Bilinear attention from view ``i`` plane embeddings to view ``j``.

    Queries come from ``E_i`` and keys from ``E_j``, both unsplit unless
    ``cfg.qk_heads > 1``.  With cross embeddings the value sides are ``E_i``
    (rows of ``C``) and ``E_j`` (columns); without, both sides come from
    ``E_i``.
    """
    if E_i.shape[1] != cfg.channels or E_j.shape[1] != cfg.channels:
        raise ShapeError("pca: embedding channels do not match the config")
    Q = dc.linear(g, params, f"{prefix}.q", E_i)
    K = dc.linear(g, params, f"{prefix}.k", E_j)
    Vl = dc.linear(g, params, f"{prefix}.vl", E_i)
    right_src = E_j if cfg.cross_embeddings else E_i
    if not cfg.cross_embeddings and E_i.shape[0] != E_j.shape[0]:
        raise ShapeError("same-image placement needs equal plane counts in both views")
    Vr = dc.linear(g, params, f"{prefix}.vr", right_src)

    Cs, Ss = [], []
    if cfg.qk_heads == 1:
        C, S = dual_softmax_graph(g, Q, K)
        Cs.append(C)
        Ss.append(S)
    else:
        d = cfg.head_dim
        for h in range(cfg.qk_heads):
            C, S = dual_softmax_graph(g, dc.slice_(Q, h * d, (h + 1) * d), dc.slice_(K, h * d, (h + 1) * d))
            Cs.append(C)
            Ss.append(S)

    d = cfg.head_dim
    blocks = []
    for h in range(cfg.v_heads):
        C = Cs[h] if len(Cs) > 1 else Cs[0]
        if cfg.v_heads == 1:
            vl, vr = Vl, Vr
        else:
            vl = dc.slice_(Vl, h * d, (h + 1) * d)
            vr = dc.slice_(Vr, h * d, (h + 1) * d)
        blocks.append(vl.T @ C @ vr)
    fmap = blocks[0] if len(blocks) == 1 else dc.concat(*blocks)
    feature = dc.reshape(fmap, (1, fmap.value.size))
    projected = dc.linear(g, params, f"{prefix}.o", feature)
    return PcaOutput(feature, projected, Cs, Ss)


# ---------------------------------------------------------------------------
# pose regression


def init_pose_module(params: dict, rng: dc.RngStream, cfg: AttentionConfig, mlp_width: int | None = None) -> None:
    c = cfg.channels
    width = mlp_width or c
    init_pca(params, rng.child(0), "pose.pca12", cfg)
    init_pca(params, rng.child(1), "pose.pca21", cfg)
    dc.init_mlp(params, rng.child(2), "pose.mlp", 2 * c, width, 7, 2)
    # zero final layer: translation 0, quaternion bias (1, 0, 0, 0)
    params["pose.mlp.out.W"] = np.zeros_like(params["pose.mlp.out.W"])
    params["pose.mlp.out.b"] = np.array([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]])


@dataclass
class PoseOutput:
    q: dc.Node  # (1, 4) unit, w >= 0
    t: dc.Node  # (1, 3)
    out12: PcaOutput
    out21: PcaOutput

    @property
    def pose(self) -> PoseSE3:
        return PoseSE3(self.q.value.reshape(4), self.t.value.reshape(3))

    @property
    def C12(self) -> np.ndarray:
        """Correspondence 1->2; the mean over heads when query/key are split."""
        return _mean_c(self.out12.C)

    @property
    def C21(self) -> np.ndarray:
        return _mean_c(self.out21.C)


def _mean_c(nodes) -> np.ndarray:
    if len(nodes) == 1:
        return nodes[0].value
    return sum(n.value for n in nodes) / len(nodes)


def pose_module_forward(g: dc.Graph, params: dict, E1: dc.Node, E2: dc.Node, cfg: AttentionConfig) -> PoseOutput:
    """Two parallel plane-aware cross attentions (1->2, 2->1) and an MLP pose head."""
    out12 = pca(g, params, "pose.pca12", E1, E2, cfg)
    out21 = pca(g, params, "pose.pca21", E2, E1, cfg)
    x = dc.concat(out12.projected, out21.projected)
    raw = dc.mlp(g, params, "pose.mlp", x, 2)
    t = dc.slice_(raw, 0, 3)
    q = dc.l2_normalize(dc.slice_(raw, 3, 7))
    if q.value[0, 0] < 0:
        q = -q
    return PoseOutput(q, t, out12, out21)
