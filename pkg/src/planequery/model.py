"""Full two-view network: toy pixel encoder, query decoder, plane heads, pose module."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .attention import AttentionConfig, init_mca, init_pose_module, mca, pose_module_forward
from .errors import CheckpointError, ConfigError
from .planehead import decode_masks_depths, decode_properties, init_plane_heads
from .synth import RAW_CHANNELS
from .tensorfile import load_tensors, save_tensors


@dataclass(frozen=True)
class ModelConfig:
    n_queries: int = 8
    channels: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    head_hidden_layers: int = 2
    pixel_mlp: bool = True
    query_self_attention: bool = True
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if self.attention.channels != self.channels:
            raise ConfigError("attention channels must equal model channels")
        if self.channels % self.decoder_heads:
            raise ConfigError("channels not divisible by decoder heads")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        att = AttentionConfig(**d.pop("attention", {}))
        return cls(attention=att, **d)

    def with_attention(self, **kw) -> "ModelConfig":
        return replace(self, attention=replace(self.attention, **kw))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = dc.RngStream(seed, 101)
    c = cfg.channels
    params: dict[str, np.ndarray] = {}
    dc.init_linear(params, rng.child(0), "enc.in", RAW_CHANNELS, c)
    if cfg.pixel_mlp:
        dc.init_linear(params, rng.child(1), "enc.mlp1", c, c)
        dc.init_linear(params, rng.child(2), "enc.mlp2", c, c)
    dc.init_linear(params, rng.child(3), "enc.pix", c, c)
    params["dec.query"] = rng.child(4).normal(0.0, 1.0, size=(cfg.n_queries, c))
    for layer in range(cfg.decoder_layers):
        base = rng.child(10 + layer)
        if cfg.query_self_attention:
            init_mca(params, base.child(0), f"dec.{layer}.self", c)
        init_mca(params, base.child(1), f"dec.{layer}.cross", c)
        dc.init_linear(params, base.child(2), f"dec.{layer}.ffn1", c, c)
        dc.init_linear(params, base.child(3), f"dec.{layer}.ffn2", c, c)
    init_plane_heads(params, rng.child(20), c, cfg.head_hidden_layers)
    init_pose_module(params, rng.child(30), cfg.attention)
    return params


# ---------------------------------------------------------------------------
# forward passes


def pixel_encoder(g: dc.Graph, params: dict, cfg: ModelConfig, raw: np.ndarray):
    """Per-pixel features ``F (P, C)`` and ``E_pixel (C, P)`` from raw ``(8, H, W)`` features."""
    P = raw.shape[1] * raw.shape[2]
    x = g.const(raw.reshape(raw.shape[0], P).T)
    F = dc.linear(g, params, "enc.in", x)
    if cfg.pixel_mlp:
        F = F + dc.linear(g, params, "enc.mlp2", dc.relu(dc.linear(g, params, "enc.mlp1", F)))
    E_pixel = dc.linear(g, params, "enc.pix", F).T
    return F, E_pixel


def toy_query_decoder(g: dc.Graph, params: dict, cfg: ModelConfig, F: dc.Node) -> dc.Node:
    """Learned queries refined by cross attention against pixel features; returns ``E_plane``."""
    X = g.param("dec.query", params["dec.query"])
    for layer in range(cfg.decoder_layers):
        if cfg.query_self_attention:
            X = X + mca(g, params, f"dec.{layer}.self", X, X, cfg.decoder_heads)
        X = X + mca(g, params, f"dec.{layer}.cross", X, F, cfg.decoder_heads)
        h = dc.relu(dc.linear(g, params, f"dec.{layer}.ffn1", X))
        X = X + dc.linear(g, params, f"dec.{layer}.ffn2", h)
    return X


def forward_view(g: dc.Graph, params: dict, cfg: ModelConfig, raw: np.ndarray) -> dict:
    """Monocular branch for one image.

    Returns a dict of nodes: ``E_plane (N,C)``, ``E_pixel (C,P)``,
    ``p_logits (N,1)``, ``n (N,3)``, ``mask_logits (N,P)``, ``depth (N,P)``.
    """
    F, E_pixel = pixel_encoder(g, params, cfg, raw)
    E_plane = toy_query_decoder(g, params, cfg, F)
    heads = decode_properties(g, params, E_plane, cfg.head_hidden_layers)
    mask_logits, depth = decode_masks_depths(heads["mask_emb"], heads["depth_emb"], E_pixel)
    return {
        "E_plane": E_plane,
        "E_pixel": E_pixel,
        "p_logits": heads["p_logits"],
        "n": heads["n"],
        "mask_logits": mask_logits,
        "depth": depth,
    }


def forward_pair(g: dc.Graph, params: dict, cfg: ModelConfig, raw1: np.ndarray, raw2: np.ndarray):
    v1 = forward_view(g, params, cfg, raw1)
    v2 = forward_view(g, params, cfg, raw2)
    pose = pose_module_forward(g, params, v1["E_plane"], v2["E_plane"], cfg.attention)
    return v1, v2, pose


def head_values(view: dict) -> dict:
    return {k: view[k].value for k in ("p_logits", "n", "mask_logits", "depth")}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, cfg: ModelConfig, meta: dict | None = None) -> None:
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        names = list(params)
        save_tensors(root / "params.bin", [params[k] for k in names], dtype="f64")
        (root / "checkpoint.json").write_text(
            json.dumps({"names": names, "model": cfg.to_dict(), "meta": meta or {}}, indent=1, sort_keys=True)
        )
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc


def load_checkpoint(path):
    root = Path(path)
    if not (root / "checkpoint.json").exists():
        raise CheckpointError(f"no checkpoint at {root}")
    info = json.loads((root / "checkpoint.json").read_text())
    arrays = load_tensors(root / "params.bin")
    if len(arrays) != len(info["names"]):
        raise CheckpointError("checkpoint tensor count does not match its index")
    params = {k: a.astype(np.float64) for k, a in zip(info["names"], arrays)}
    return params, ModelConfig.from_dict(info["model"]), info.get("meta", {})
