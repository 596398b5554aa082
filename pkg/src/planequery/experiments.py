"""Scripted experiments: the pose benchmark with its baselines, the ablation
sweep and the two-phase learning gate.

Every gated number lands in an ``ExperimentReport`` next to the threshold it
was compared against, so a report is self-describing.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .attention import ablation_variants, init_pose_module
from .config import build_objects, config_hash
from .evaluation import evaluate, model_predictor
from .geometry import PoseSE3
from .metrics import pose_errors, pose_stats_from_errors
from .model import ModelConfig, forward_pair, init_params, save_checkpoint
from .synth import generate_scene
from .tensorfile import save_tensors
from .training import AdamWState, PairData, TrainConfig, prepare_pair, run_phase, write_loss_csv


@dataclass
class Criterion:
    name: str
    description: str
    measured: float
    threshold: float
    op: str  # "<=" or ">="
    passed: bool

    @classmethod
    def check(cls, name, description, measured, threshold, op):
        ok = measured <= threshold if op == "<=" else measured >= threshold
        return cls(name, description, float(measured), float(threshold), op, bool(ok))


@dataclass
class ExperimentReport:
    name: str
    config_hash: str
    values: dict
    baselines: dict
    criteria: list = field(default_factory=list)
    flags: list = field(default_factory=list)  # reported, never gating
    extra: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)  # wall clock, excluded from comparisons

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def to_dict(self, with_timing: bool = True) -> dict:
        d = {
            "name": self.name,
            "config_hash": self.config_hash,
            "passed": self.passed,
            "criteria": [asdict(c) for c in self.criteria],
            "values": self.values,
            "baselines": self.baselines,
            "flags": self.flags,
            "extra": self.extra,
        }
        if with_timing:
            d["timing"] = self.timing
        return d

    def to_json(self, with_timing: bool = True) -> str:
        return json.dumps(self.to_dict(with_timing), indent=1, sort_keys=True)

    def to_markdown(self) -> str:
        lines = [f"# {self.name}", "", f"config hash: `{self.config_hash}`", ""]
        if self.criteria:
            lines += ["| criterion | measured | threshold | result |", "|---|---|---|---|"]
            for c in self.criteria:
                lines.append(f"| {c.name}: {c.description} | {c.measured:.6g} | {c.op} {c.threshold:.6g} | "
                             f"{'pass' if c.passed else 'FAIL'} |")
            lines.append("")
        if self.flags:
            lines += ["Flags:", ""] + [f"- {f}" for f in self.flags] + [""]
        rows = self.extra.get("table")
        if rows:
            keys = list(rows[0])
            lines += ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
            for r in rows:
                lines.append("| " + " | ".join(_fmt(r[k]) for k in keys) + " |")
            lines.append("")
        lines += ["## values", "", "```json", json.dumps(self.values, indent=1, sort_keys=True), "```", "",
                  "## baselines", "", "```json", json.dumps(self.baselines, indent=1, sort_keys=True), "```"]
        if self.timing:
            lines += ["", "## timing (s)", ""] + [f"- {k}: {v:.1f}" for k, v in self.timing.items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.md").write_text(self.to_markdown())


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# pose benchmark


def identity_baseline(pairs: list[PairData]) -> dict:
    """Pose statistics of always predicting no motion."""
    gt = [p.relative for p in pairs]
    te, re = pose_errors([PoseSE3.identity()] * len(gt), gt)
    return pose_stats_from_errors(te, re).to_dict()


def _eval_kwargs(ecfg: dict) -> dict:
    return {
        "theta": ecfg["theta"],
        "thetas": tuple(ecfg["thetas"]),
        "tiers": tuple(tuple(t) for t in ecfg["tiers"]),
        "p_keep": ecfg["p_keep"],
        "random_draws": ecfg["random_draws"],
    }


def _summary(r: dict) -> dict:
    return {
        "pose_loss": r["pose_loss"],
        "pose": r["pose"],
        "correspondence": r["correspondence"],
        "f_score": r["f_score"],
        "random_matching": r["random_matching"],
        "ap": r["ap"],
        "plane_recall_0.6m": r["plane_recall_0.6m"],
        "segmentation": r["segmentation"],
        "params": r["params"],
    }


def run_pose_benchmark(pairs: list[PairData], params: dict, model_cfg: ModelConfig, init: dict,
                       ecfg: dict, cfg_hash: str = "", init_report: dict | None = None) -> ExperimentReport:
    """Trained model against the identity-pose, random-matching and untrained baselines.

    ``init`` holds the untrained (zero-initialized pose head) parameters;
    ``init_report`` may pass a precomputed evaluation of them.
    """
    if ecfg["theta"] not in ecfg["thetas"]:
        ecfg = {**ecfg, "thetas": sorted({*ecfg["thetas"], ecfg["theta"]})}
    kw = _eval_kwargs(ecfg)
    avg = ecfg["average_directions"]
    trained = evaluate(pairs, model_predictor(params, model_cfg, avg), **kw)
    if init_report is None:
        init_report = evaluate(pairs, model_predictor(init, model_cfg, avg), **kw)
    ident = identity_baseline(pairs)
    rand_f = trained["random_matching"]["f_score"]
    crit = [
        Criterion.check("pose_loss", "held-out pose loss vs 0.5 x untrained", trained["pose_loss"],
                        0.5 * init_report["pose_loss"], "<="),
        Criterion.check("rot_median", "rotation median (deg) vs 0.5 x identity baseline", trained["pose"]["rot_median"],
                        0.5 * ident["rot_median"], "<="),
        Criterion.check("trans_median", "translation median (m) vs 0.5 x identity baseline",
                        trained["pose"]["trans_median"], 0.5 * ident["trans_median"], "<="),
        Criterion.check("f_score", f"MNN F-score at theta={ecfg['theta']:g} vs 3 x random matching",
                        trained["f_score"], 3.0 * rand_f, ">="),
        Criterion.check("plane_recall", "plane recall at (0.6 m, IoU 0.5) vs 2 x untrained", trained["plane_recall_0.6m"],
                        2.0 * init_report["plane_recall_0.6m"], ">="),
    ]
    return ExperimentReport(
        "pose benchmark",
        cfg_hash,
        _summary(trained),
        {"identity_pose": ident, "random_matching": trained["random_matching"], "untrained": _summary(init_report)},
        crit,
    )


# ---------------------------------------------------------------------------
# data and training


def build_pairs(gen_cfg, n: int, split: str, sigma: float, progress=None) -> list[PairData]:
    out = []
    for i in range(n):
        out.append(prepare_pair(generate_scene(gen_cfg, i, split), sigma))
        if progress and (i + 1) % 250 == 0:
            progress(f"{split}: {i + 1}/{n} pairs")
    return out


def train_two_phase(params: dict, model_cfg: ModelConfig, tcfg: TrainConfig, pairs: list[PairData],
                    mono: bool = True, joint: bool = True, log=None) -> list[dict]:
    rows = []
    if mono:
        rows += run_phase(params, model_cfg, pairs, tcfg, "mono", tcfg.mono_epochs, AdamWState(), log)
    if joint:
        rows += run_phase(params, model_cfg, pairs, tcfg, "joint", tcfg.joint_epochs, AdamWState(), log)
    return rows


def run_learning_gate(cfg: dict, out_dir=None, log=None) -> ExperimentReport:
    """Generate the benchmark, train both phases from the seed, and benchmark.

    Writes the report, loss curves and final checkpoint when ``out_dir`` is set.
    """
    say = log or (lambda msg: None)
    gen_cfg, model_cfg, tcfg = build_objects(cfg)
    t0 = time.perf_counter()
    train = build_pairs(gen_cfg, cfg["dataset"]["n_train"], "train", tcfg.noise_sigma, say)
    test = build_pairs(gen_cfg, cfg["dataset"]["n_test"], "test", tcfg.noise_sigma, say)
    t_data = time.perf_counter() - t0
    params = init_params(model_cfg, cfg["seed"])
    init = {k: v.copy() for k, v in params.items()}
    init_report = evaluate(test, model_predictor(init, model_cfg, cfg["eval"]["average_directions"]),
                           **_eval_kwargs(cfg["eval"]))
    say(f"untrained: pose loss {init_report['pose_loss']:.4f}, recall {init_report['plane_recall_0.6m']:.4f}")
    t1 = time.perf_counter()
    rows = train_two_phase(params, model_cfg, tcfg, train, log=lambda r: say(_row_text(r)))
    t_train = time.perf_counter() - t1
    report = run_pose_benchmark(test, params, model_cfg, init, cfg["eval"], config_hash(cfg), init_report)
    report.name = "learning gate"
    report.extra["loss_curve"] = [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    report.timing = {"data": t_data, "train": t_train, "total": time.perf_counter() - t0}
    if out_dir is not None:
        out = Path(out_dir)
        report.write(out)
        write_loss_csv(out / "loss.csv", rows)
        save_checkpoint(out / "checkpoint", params, model_cfg, {"phase": "joint", "config_hash": report.config_hash})
    return report


def _row_text(r: dict) -> str:
    s = f"{r['phase']} epoch {r['epoch']}: loss {r['loss']:.4f}"
    if r["pose_loss"] != "":
        s += f", pose {r['pose_loss']:.4f}"
    return s + f" ({r['seconds']:.0f}s)"


# ---------------------------------------------------------------------------
# ablations


def correspondence_heads(params: dict, model_cfg: ModelConfig, pair: PairData) -> np.ndarray:
    """Per-head 1->2 correspondence matrices, shape ``(qk_heads, N, N)``."""
    out = forward_pair(dc.Graph(), params, model_cfg, pair.raw[0], pair.raw[1])[2]
    return np.stack([c.value for c in out.out12.C])


def run_ablations(train: list[PairData], test: list[PairData], model_cfg: ModelConfig, tcfg: TrainConfig,
                  ecfg: dict, seed: int = 0, mono_params: dict | None = None, out_dir=None, cfg_hash: str = "",
                  log=None) -> ExperimentReport:
    """Full model against the no-cross-embedding, QK-split and single-value-head variants.

    The monocular phase does not touch the pose module, so it runs once (or
    ``mono_params`` is reused) and each variant gets a freshly initialized
    pose module before its joint phase.
    """
    say = log or (lambda msg: None)
    if mono_params is None:
        mono_params = init_params(model_cfg, seed)
        run_phase(mono_params, model_cfg, train, tcfg, "mono", tcfg.mono_epochs, AdamWState())
    rows, values, heatmaps = [], {}, {}
    for name, att in ablation_variants(model_cfg.attention).items():
        vcfg = model_cfg.with_attention(**asdict(att))
        params = {k: v.copy() for k, v in mono_params.items() if not k.startswith("pose.")}
        init_pose_module(params, dc.RngStream(seed, 101).child(30), att)
        run_phase(params, vcfg, train, tcfg, "joint", tcfg.joint_epochs, AdamWState())
        r = evaluate(test, model_predictor(params, vcfg, ecfg["average_directions"]), **_eval_kwargs(ecfg))
        values[name] = _summary(r)
        rows.append({
            "variant": name,
            "CE": "yes" if att.cross_embeddings else "no",
            "QKNum": att.qk_heads,
            "VNum": att.v_heads,
            "trans_median": r["pose"]["trans_median"],
            "rot_median": r["pose"]["rot_median"],
            "F": r["f_score"],
            **{f"AP {k}": v for k, v in r["ap"].items()},
        })
        if test and name in ("full", "qk_split"):
            heatmaps[name] = correspondence_heads(params, vcfg, test[0])
        say(f"{name}: F {r['f_score']:.4f}, rot median {r['pose']['rot_median']:.2f}")
    flags = [
        f"full F-score {values['full']['f_score']:.4g} below {name} {values[name]['f_score']:.4g}"
        for name in values if name != "full" and values[name]["f_score"] > values["full"]["f_score"]
    ]
    extra = {"table": rows, "heatmaps": {k: v.tolist() for k, v in heatmaps.items()}}
    report = ExperimentReport("ablations", cfg_hash, values, {}, [], flags, extra)
    if out_dir is not None:
        out = Path(out_dir)
        report.write(out, "ablations")
        for name, C in heatmaps.items():
            save_tensors(out / f"heatmap_{name}.bin", [C])
    return report


__all__ = [
    "Criterion", "ExperimentReport", "identity_baseline", "run_pose_benchmark", "build_pairs",
    "train_two_phase", "run_learning_gate", "correspondence_heads", "run_ablations",
]
