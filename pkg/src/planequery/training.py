"""AdamW, per-sample gradient steps and the two-phase training loops."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, NumericError
from .geometry import PoseSE3
from .losses import LossWeights, ViewTargets, match_view, mono_loss_graph, pose_loss_graph
from .model import ModelConfig, forward_pair, forward_view, head_values
from .synth import SceneSample, featurize_pixels


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive, weight decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamWState, cfg: AdamWConfig = AdamWConfig()) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters without a gradient entry are still decayed.
    """
    for k, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            bad = int(np.size(gr) - np.isfinite(gr).sum())
            raise NumericError(f"non-finite gradient for {k!r} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        gr = grads.get(k)
        if cfg.weight_decay:
            p *= 1.0 - cfg.lr * cfg.weight_decay
        if gr is None:
            continue
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * gr
        v *= b2
        v += (1.0 - b2) * gr * gr
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# per-sample data


@dataclass
class PairData:
    raw: tuple  # two (8, H, W) feature grids
    targets: tuple  # two ViewTargets
    relative: PoseSE3  # T21
    sample: SceneSample


def view_targets(sample: SceneSample, view: int) -> ViewTargets:
    gt = sample.views[view]
    masks = gt.masks().reshape(len(gt.instances), -1)
    depth = np.broadcast_to(gt.depth.reshape(1, -1), masks.shape).copy()
    return ViewTargets(gt.params.copy(), masks, depth)


def prepare_pair(sample: SceneSample, sigma: float = 0.05) -> PairData:
    raw = (featurize_pixels(sample, 0, sigma), featurize_pixels(sample, 1, sigma))
    return PairData(raw, (view_targets(sample, 0), view_targets(sample, 1)), sample.relative, sample)


def mono_objective(g: dc.Graph, params: dict, cfg: ModelConfig, raw, targets: ViewTargets,
                   weights: LossWeights):
    view = forward_view(g, params, cfg, raw)
    hv = head_values(view)
    assignment = match_view(hv["p_logits"], hv["n"], hv["mask_logits"], hv["depth"], targets)
    total, _ = mono_loss_graph(g, view, targets, assignment, weights)
    return total


def mono_step(params: dict, cfg: ModelConfig, pair: PairData, weights: LossWeights):
    """Summed monocular loss of both views and its gradients."""
    g = dc.Graph()
    loss = mono_objective(g, params, cfg, pair.raw[0], pair.targets[0], weights)
    loss = loss + mono_objective(g, params, cfg, pair.raw[1], pair.targets[1], weights)
    return float(loss.value), dc.backward(g, loss)


def joint_graph(g: dc.Graph, params: dict, cfg: ModelConfig, pair: PairData, weights: LossWeights):
    """Pose loss plus the down-weighted monocular losses of both views."""
    v1, v2, pose = forward_pair(g, params, cfg, pair.raw[0], pair.raw[1])
    lp = pose_loss_graph(g, pose.q, pose.t, pair.relative, weights)
    mono = None
    for view, tg in ((v1, pair.targets[0]), (v2, pair.targets[1])):
        hv = head_values(view)
        a = match_view(hv["p_logits"], hv["n"], hv["mask_logits"], hv["depth"], tg)
        term, _ = mono_loss_graph(g, view, tg, a, weights)
        mono = term if mono is None else mono + term
    return lp + mono * weights.mono_scale_joint, lp


def joint_step(params: dict, cfg: ModelConfig, pair: PairData, weights: LossWeights):
    g = dc.Graph()
    total, lp = joint_graph(g, params, cfg, pair, weights)
    return float(total.value), float(lp.value), dc.backward(g, total)


# ---------------------------------------------------------------------------
# loops


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    mono_epochs: int = 30
    joint_epochs: int = 20
    batch_size: int = 16
    noise_sigma: float = 0.05
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1 or self.mono_epochs < 0 or self.joint_epochs < 0:
            raise ConfigError("batch size must be positive and epoch counts non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        opt = AdamWConfig(**d.pop("optimizer", {}))
        w = LossWeights(**d.pop("weights", {}))
        return cls(optimizer=opt, weights=w, **d)


def _accumulate(acc: dict, grads: dict) -> None:
    for k, gr in grads.items():
        if k in acc:
            acc[k] += gr
        else:
            acc[k] = gr.copy()


def run_phase(params: dict, cfg: ModelConfig, pairs: list[PairData], tcfg: TrainConfig, phase: str,
              epochs: int, state: AdamWState | None = None, log=None) -> list[dict]:
    """Mini-batch training over ``pairs``; batch gradients are sample means.

    ``phase`` is ``"mono"`` or ``"joint"``.  Returns one row per epoch.
    """
    if phase not in ("mono", "joint"):
        raise ValueError(f"unknown phase {phase!r}")
    state = state or AdamWState()
    rows = []
    for epoch in range(epochs):
        order = dc.RngStream(tcfg.seed, 202, 0 if phase == "mono" else 1, epoch).permutation(len(pairs))
        t0 = time.perf_counter()
        tot, tot_pose, count = 0.0, 0.0, 0
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            acc: dict = {}
            for i in batch:
                if phase == "mono":
                    loss, grads = mono_step(params, cfg, pairs[i], tcfg.weights)
                    lp = 0.0
                else:
                    loss, lp, grads = joint_step(params, cfg, pairs[i], tcfg.weights)
                _accumulate(acc, grads)
                tot += loss
                tot_pose += lp
                count += 1
            scale = 1.0 / len(batch)
            for k in acc:
                acc[k] *= scale
            optimizer_step(params, acc, state, tcfg.optimizer)
        row = {
            "phase": phase,
            "epoch": epoch,
            "step": state.step,
            "loss": tot / max(count, 1),
            "pose_loss": tot_pose / max(count, 1) if phase == "joint" else "",
            "seconds": round(time.perf_counter() - t0, 3),
        }
        rows.append(row)
        if log:
            log(row)
    return rows


LOSS_FIELDS = ("phase", "epoch", "step", "loss", "pose_loss", "seconds")


def write_loss_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.17g}" if isinstance(r[k], float) else r[k]) for k in LOSS_FIELDS})
