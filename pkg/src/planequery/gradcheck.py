"""Seeded gradient-check suite: every registered op plus the two end-to-end
loss graphs (monocular loss through decoder and plane heads, pose loss
through the pose module), each checked by central finite differences.
"""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .attention import AttentionConfig
from .geometry import PoseSE3, quat_from_axis_angle
from .losses import LossWeights, ViewTargets, pose_loss_graph
from .model import ModelConfig, forward_pair, init_params
from .training import mono_objective

TOLERANCE = 1e-4

# ---------------------------------------------------------------------------
# per-op instances


def _away(rng, shape, lo=0.05):
    """Values bounded away from zero (keeps kinks out of finite differences)."""
    x = rng.uniform(lo, 2.0, size=shape)
    return x * np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)


OP_CASES = {
    "matmul": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(3, 4))], {}),
    "transpose": lambda r: ([r.normal(size=(3, 5))], {}),
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "subtract": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "multiply": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "divide": lambda r: ([r.normal(size=(3, 4)), _away(r, (3, 4), 0.5)], {}),
    "scale": lambda r: ([r.normal(size=(3, 4))], {"c": float(r.normal())}),
    "add_row": lambda r: ([r.normal(size=(5, 3)), r.normal(size=(1, 3))], {}),
    "concat": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 1)), r.normal(size=(2, 4))], {}),
    "slice": lambda r: ([r.normal(size=(3, 6))], {"axis": 1, "start": 1, "stop": 4}),
    "reshape": lambda r: ([r.normal(size=(3, 4))], {"shape": (2, 6)}),
    "row_softmax": lambda r: ([r.normal(size=(3, 5)) * 2], {}),
    "col_softmax": lambda r: ([r.normal(size=(4, 3)) * 2], {}),
    "relu": lambda r: ([_away(r, (3, 4))], {}),
    "sigmoid": lambda r: ([r.normal(size=(3, 4)) * 3], {}),
    "exp": lambda r: ([r.normal(size=(3, 4))], {}),
    "log": lambda r: ([r.uniform(0.2, 3.0, size=(3, 4))], {}),
    "sqrt": lambda r: ([r.uniform(0.2, 3.0, size=(3, 4))], {}),
    "abs": lambda r: ([_away(r, (3, 4))], {}),
    "softplus": lambda r: ([r.normal(size=(3, 4)) * 4], {}),
    "clamp": lambda r: ([_away(r, (3, 4)) * 2], {"lo": -1.0 + 0.013, "hi": 1.0 + 0.017}),
    "sin": lambda r: ([r.normal(size=(3, 4))], {}),
    "cos": lambda r: ([r.normal(size=(3, 4))], {}),
    "atan2": lambda r: ([r.normal(size=(3, 4)), _away(r, (3, 4), 0.3)], {}),
    "so3_vinv_coef": lambda r: ([r.uniform(1e-4, 3.0, size=(1, 3))], {}),
    "l2_normalize": lambda r: ([r.normal(size=(3, 4))], {}),
    "sum": lambda r: ([r.normal(size=(3, 4))], {"axis": int(r.integers(0, 2))}),
    "mean": lambda r: ([r.normal(size=(3, 4))], {"axis": None}),
    "dot": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
}


def op_instance(kind: str, seed: int):
    rng = dc.RngStream(seed, 9000, sorted(OP_CASES).index(kind))
    inputs, attrs = OP_CASES[kind](rng)
    g = dc.Graph()
    nodes = [g.param(f"x{i}", v) for i, v in enumerate(inputs)]
    out = g.op(kind, *nodes, **attrs)
    w = g.const(rng.normal(size=out.shape))
    loss = dc.sum_(out * w)
    return g, loss


def op_grad_error(kind: str, seed: int, h: float = 1e-6) -> float:
    g, loss = op_instance(kind, seed)
    return max(dc.grad_check_all(g, loss, h=h, coords=None).values())


# ---------------------------------------------------------------------------
# small end-to-end instances

SMALL_GRID = (6, 8)


def small_model_config() -> ModelConfig:
    return ModelConfig(n_queries=4, channels=16, decoder_layers=2, decoder_heads=2,
                       attention=AttentionConfig(channels=16, v_heads=4, qk_heads=1))


def random_view(rng: dc.RngStream, grid=SMALL_GRID, M=2):
    H, W = grid
    raw = rng.normal(size=(8, H, W))
    seg = rng.integers(-1, M, size=(H, W))
    seg.reshape(-1)[:M] = np.arange(M)  # every plane owns at least one pixel
    masks = np.stack([(seg == k).reshape(-1) for k in range(M)])
    depth = rng.uniform(1.0, 4.0, size=(M, H * W))
    n = rng.normal(size=(M, 3)) * 0.5
    return raw, ViewTargets(n, masks, depth)


def perturbed_params(cfg: ModelConfig, seed: int):
    params = init_params(cfg, seed)
    rng = dc.RngStream(seed, 77)
    # a zero output layer would hide every upstream gradient of the pose head
    params["pose.mlp.out.W"] = rng.normal(0.0, 0.3, size=params["pose.mlp.out.W"].shape)
    return params


def mono_graph_instance(seed: int):
    cfg = small_model_config()
    params = perturbed_params(cfg, seed)
    raw, tg = random_view(dc.RngStream(seed, 1))
    g = dc.Graph()
    loss = mono_objective(g, params, cfg, raw, tg, LossWeights())
    return g, loss


def random_pose(rng: dc.RngStream, max_angle=math.pi - 1e-3, max_t=2.0) -> PoseSE3:
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    return PoseSE3(quat_from_axis_angle(axis, angle), rng.uniform(-max_t, max_t, size=3))


def pose_graph_instance(seed: int):
    cfg = small_model_config()
    params = perturbed_params(cfg, seed)
    rng = dc.RngStream(seed, 2)
    raw1, _ = random_view(rng)
    raw2, _ = random_view(rng)
    g = dc.Graph()
    _, _, pose = forward_pair(g, params, cfg, raw1, raw2)
    loss = pose_loss_graph(g, pose.q, pose.t, random_pose(rng, max_angle=2.5), LossWeights())
    return g, loss


def graph_grad_error(g, loss, coords=3, seed=0, h=1e-6) -> float:
    return max(dc.grad_check_all(g, loss, h=h, coords=coords, seed=seed).values())


def pose_direct_instance(seed: int):
    """Pose loss with the quaternion and translation as free parameters."""
    rng = dc.RngStream(seed, 5)
    T, T_gt = random_pose(rng, max_angle=2.5), random_pose(rng, max_angle=2.5)
    g = dc.Graph()
    q = g.param("q", T.q.reshape(1, 4))
    t = g.param("t", T.t.reshape(1, 3))
    return g, pose_loss_graph(g, q, t, T_gt)


def run_suite(seeds: int = 10, coords: int = 3, log=None) -> dict:
    """Worst relative error per check, over ``seeds`` seeded instances each."""
    results = {}
    for kind in sorted(OP_CASES):
        results[f"op:{kind}"] = max(op_grad_error(kind, s) for s in range(seeds))
        if log:
            log(f"op:{kind} {results[f'op:{kind}']:.2e}")
    graphs = {"pose_loss": pose_direct_instance, "mono_end_to_end": mono_graph_instance,
              "pose_end_to_end": pose_graph_instance}
    for name, build in graphs.items():
        errs = []
        for s in range(seeds):
            g, loss = build(s)
            errs.append(max(dc.grad_check_all(g, loss, coords=coords, seed=s).values()))
        results[name] = max(errs)
        if log:
            log(f"{name} {results[name]:.2e}")
    return results
