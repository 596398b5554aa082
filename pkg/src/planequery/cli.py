"""Command-line entry point: ``planequery <command> [options]``.

Exit codes: 0 ok, 2 bad configuration, 3 I/O (missing dataset or checkpoint,
corrupt tensor file), 4 numeric failure, 5 acceptance-gate failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .attention import init_pose_module
from .config import SCHEMA, attention_overrides, build_objects, config_hash, load_config
from .errors import CheckpointError, ConfigError, DomainError, NumericError, TensorFileError
from .evaluation import evaluate, format_report, gt_predictor, model_predictor, predicted_query_pairs
from .experiments import ExperimentReport, run_ablations, run_learning_gate, run_pose_benchmark
from .geometry import CameraIntrinsics, PoseSE3, depth_map_from_planes, fuse_planes, plane_transform, se3_inverse
from .gradcheck import TOLERANCE, run_suite
from .matching import mnn_filter
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .planehead import monocular_infer, predictions_from_heads
from .synth import Dataset, make_dataset
from .tensorfile import save_tensors
from .training import AdamWState, prepare_pair, run_phase, write_loss_csv

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4, 5


class GateFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling


def _tier(text: str):
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tier must be 'DEG,METRES', got {text!r}") from None
    if a <= 0 or b <= 0:
        raise argparse.ArgumentTypeError("tier thresholds must be positive")
    return [a, b]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults are used for missing keys)")
    common.add_argument("--seed", type=int, help="run seed; for gen, the dataset seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--qk-heads", type=int, help="query/key heads in plane-aware attention (1 or v-heads)")
    common.add_argument("--v-heads", type=int, help="value heads in plane-aware attention")
    common.add_argument("--no-cross-embeddings", action="store_true",
                        help="feed both bilinear sides from the same image")
    common.add_argument("--theta", type=float, help="MNN probability threshold")
    common.add_argument("--tier", type=_tier, action="append",
                        help="AP threshold 'DEG,METRES'; repeat for several tiers")
    common.add_argument("--average-directions", action="store_true",
                        help="use (C12 + C21^T)/2 as the correspondence matrix")

    p = argparse.ArgumentParser(prog="planequery", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, data=True, ckpt=False):
        s = sub.add_parser(name, parents=[common], help=help_)
        if data:
            s.add_argument("--data", required=True, help="dataset directory written by gen")
        if ckpt:
            s.add_argument("--ckpt", help="checkpoint directory")
        return s

    add("gen", "generate the synthetic two-view dataset", data=False)
    add("train-mono", "monocular pre-training phase")
    s = add("train-pose", "joint training phase")
    s.add_argument("--init", help="checkpoint from train-mono")
    s.add_argument("--from-scratch", action="store_true", help="start from a fresh initialization")
    s = add("eval", "metric report on the test split", ckpt=True)
    s.add_argument("--gt", action="store_true", help="evaluate ground truth fed as predictions")
    s.add_argument("--split", default="test", choices=("train", "test"))
    s = add("match", "dump correspondence matrices and MNN assignments", ckpt=True)
    s.add_argument("--limit", type=int, help="only the first LIMIT test pairs")
    s = add("reconstruct", "fused two-view geometry as PLY", ckpt=True)
    s.add_argument("--gt", action="store_true", help="reconstruct from ground truth")
    s.add_argument("--limit", type=int, help="only the first LIMIT test pairs")
    s.add_argument("--fuse-normal-deg", type=float, default=30.0, help="fusion normal threshold (deg)")
    s.add_argument("--fuse-offset", type=float, default=0.5, help="fusion offset threshold (m)")
    s = add("gradcheck", "finite-difference checks of every op and loss graph", data=False)
    s.add_argument("--instances", type=int, default=10, help="seeded instances per check")
    s = add("benchmark", "pose benchmark against the baselines (gated)", ckpt=True)
    s.add_argument("--init-ckpt", help="untrained reference checkpoint (default: fresh init from the seed)")
    s = add("ablations", "train and compare the attention ablation variants")
    s.add_argument("--mono-ckpt", help="reuse a train-mono checkpoint for all variants")
    add("gate", "generate, train both phases and benchmark (gated)", data=False)
    add("config", "print the default configuration", data=False)
    add("schema", "print the configuration JSON schema", data=False)
    return p


def resolve_config(args) -> dict:
    over = attention_overrides(args.qk_heads, args.v_heads, args.no_cross_embeddings)
    ev = {}
    if args.theta is not None:
        ev["theta"] = args.theta
    if args.tier:
        ev["tiers"] = args.tier
    if args.average_directions:
        ev["average_directions"] = True
    if ev:
        over["eval"] = ev
    if args.seed is not None:
        over["seed"] = args.seed
        if args.command == "gen":
            over["dataset"] = {"generator": {"seed": args.seed}}
    cfg = load_config(args.config, over)
    e = cfg["eval"]
    if e["theta"] not in e["thetas"]:
        e["thetas"] = sorted([*e["thetas"], e["theta"]])
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _pairs(args, cfg, split="test", limit=None):
    ds = Dataset(args.data)
    ids = ds.ids(split)[:limit]
    sigma = cfg["train"]["noise_sigma"]
    return ids, [prepare_pair(ds.load(i), sigma) for i in ids]


def _model_cfg(cfg) -> ModelConfig:
    return build_objects(cfg)[1]


def _load_model(path, model_cfg: ModelConfig):
    """Checkpoint parameters; a differing attention config gets a fresh pose module."""
    params, saved, meta = load_checkpoint(path)
    if asdict(saved) | {"attention": None} != asdict(model_cfg) | {"attention": None}:
        raise ConfigError(f"checkpoint {path} was trained with a different model: {saved}")
    if saved.attention != model_cfg.attention:
        params = {k: v for k, v in params.items() if not k.startswith("pose.")}
        init_pose_module(params, dc.RngStream(meta.get("seed", 0), 101).child(30), model_cfg.attention)
    return params, meta


def _need_ckpt(args):
    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    return args.ckpt


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg):
    gen, _, _ = build_objects(cfg)
    out = _out(args, "data")
    m = make_dataset(gen, cfg["dataset"]["n_train"], cfg["dataset"]["n_test"], out,
                     lambda i, n: _log(f"{i}/{n} pairs") if i % 250 == 0 or i == n else None)
    print(json.dumps({"out": str(out), "n_train": m["n_train"], "n_test": m["n_test"],
                      "content_hash": m["content_hash"]}))


def _train(args, cfg, phase, params):
    _, model_cfg, tcfg = build_objects(cfg)
    _, pairs = _pairs(args, cfg, "train")
    epochs = tcfg.mono_epochs if phase == "mono" else tcfg.joint_epochs
    rows = run_phase(params, model_cfg, pairs, tcfg, phase, epochs, AdamWState(),
                     log=lambda r: _log(f"{phase} epoch {r['epoch']}: loss {r['loss']:.5f}"))
    out = _out(args, f"runs/{phase}")
    write_loss_csv(out / "loss.csv", rows)
    save_checkpoint(out / "checkpoint", params, model_cfg,
                    {"phase": phase, "seed": cfg["seed"], "config_hash": config_hash(cfg)})
    print(json.dumps({"checkpoint": str(out / "checkpoint"), "final_loss": rows[-1]["loss"] if rows else None}))


def cmd_train_mono(args, cfg):
    Dataset(args.data)  # fail before any work if the dataset is missing
    _train(args, cfg, "mono", init_params(_model_cfg(cfg), cfg["seed"]))


def cmd_train_pose(args, cfg):
    Dataset(args.data)
    model_cfg = _model_cfg(cfg)
    if args.init:
        params, _ = _load_model(args.init, model_cfg)
    elif args.from_scratch:
        params = init_params(model_cfg, cfg["seed"])
    else:
        raise CheckpointError("train-pose needs --init CHECKPOINT from train-mono, or --from-scratch")
    _train(args, cfg, "joint", params)


def _predictor(args, cfg):
    if getattr(args, "gt", False):
        return gt_predictor
    model_cfg = _model_cfg(cfg)
    params, _ = _load_model(_need_ckpt(args), model_cfg)
    return model_predictor(params, model_cfg, cfg["eval"]["average_directions"])


def _eval_kw(cfg):
    e = cfg["eval"]
    return {"theta": e["theta"], "thetas": tuple(e["thetas"]), "tiers": tuple(tuple(t) for t in e["tiers"]),
            "p_keep": e["p_keep"], "random_draws": e["random_draws"], "random_seed": cfg["seed"]}


def cmd_eval(args, cfg):
    predictor = _predictor(args, cfg)
    _, pairs = _pairs(args, cfg, args.split)
    report = evaluate(pairs, predictor, **_eval_kw(cfg))
    out = _out(args, "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(format_report(report))


def cmd_match(args, cfg):
    predictor = _predictor(args, cfg)
    ids, pairs = _pairs(args, cfg, "test", args.limit)
    out = _out(args, "runs/match")
    out.mkdir(parents=True, exist_ok=True)
    theta = cfg["eval"]["theta"]
    p_keep = cfg["eval"]["p_keep"]
    summary = []
    for gid, pair in zip(ids, pairs):
        pred = predictor(pair)
        save_tensors(out / f"pair_{gid:04d}_C12.bin", [pred.C12])
        kept = []
        for h in pred.heads:
            p = 0.5 * (1.0 + np.tanh(0.5 * h["p_logits"].reshape(-1)))
            kept.append([int(i) for i in np.nonzero(p > p_keep)[0]])
        summary.append({
            "pair": gid,
            "theta": theta,
            "mnn": [list(map(int, m)) for m in mnn_filter(pred.C12, theta)],
            "mnn_kept": [list(map(int, m)) for m in predicted_query_pairs(pred.C12, kept[0], kept[1], theta)],
            "kept": kept,
        })
    (out / "matches.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({"out": str(out), "pairs": len(summary)}))


# -- reconstruction ---------------------------------------------------------

PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [170, 110, 40],
])


def frustum(cam: CameraIntrinsics, T: PoseSE3, depth: float = 0.3):
    """Camera centre and image-corner points at ``depth``, mapped by ``T``."""
    corners = [(0, 0), (cam.width - 1, 0), (cam.width - 1, cam.height - 1), (0, cam.height - 1)]
    pts = [np.zeros(3)] + [depth * cam.ray(u, v) for u, v in corners]
    verts = np.array([T.R @ p + T.t for p in pts])
    edges = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (2, 3), (3, 4), (4, 1)]
    return verts, edges


def write_ply(path, points, colors, edges=()) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             f"element edge {len(edges)}", "property int vertex1", "property int vertex2", "end_header"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(points, colors)]
    lines += [f"{a} {b}" for a, b in edges]
    Path(path).write_text("\n".join(lines) + "\n")


def pair_geometry(pair, pred, theta, max_normal_deg=30.0, max_offset=0.5, p_keep=0.5):
    """Coloured points of both views in the view-1 frame plus both camera frusta.

    Matched planes that survive fusion share one colour and one plane.
    """
    cam = pair.sample.cam
    grid = (cam.height, cam.width)
    preds = [predictions_from_heads(h, grid) for h in pred.heads]
    infer = [monocular_infer(p, cam, p_keep=p_keep) for p in preds]
    qpairs = predicted_query_pairs(pred.C12, infer[0].kept, infer[1].kept, theta)
    fused, _ = fuse_planes([(a, preds[0][a].n, b, preds[1][b].n) for a, b in qpairs], pred.pose,
                           max_normal_deg, max_offset)
    T12 = se3_inverse(pred.pose)
    label = {}
    plane = {}
    for k, f in enumerate(fused):
        label[(0, f.index1)] = label[(1, f.index2)] = k
        plane[(0, f.index1)] = f.n
        plane[(1, f.index2)] = plane_transform(f.n, pred.pose)
    next_label = len(fused)
    pts, cols = [], []
    for v in (0, 1):
        res = infer[v]
        params = res.params.copy()
        for k, q in enumerate(res.kept):
            if (v, q) in plane:
                params[k] = plane[(v, q)]
            else:
                label[(v, q)] = next_label
                next_label += 1
        depth, invalid = depth_map_from_planes(res.segmentation, params, cam)
        rays = cam.rays()
        ok = (res.segmentation >= 0) & ~invalid
        X = depth[ok][:, None] * rays[ok]
        if v == 1:
            X = X @ T12.R.T + T12.t
        lab = np.array([label[(v, res.kept[k])] for k in res.segmentation[ok]], dtype=int)
        pts.append(X)
        cols.append(PALETTE[lab % len(PALETTE)] if len(lab) else np.zeros((0, 3), dtype=int))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    colors = np.concatenate(cols)
    edges = []
    for T in (PoseSE3.identity(), T12):
        fv, fe = frustum(cam, T)
        base = len(points)
        points = np.concatenate([points, fv])
        colors = np.concatenate([colors, np.full((len(fv), 3), 255, dtype=int)])
        edges += [(a + base, b + base) for a, b in fe]
    return points, colors, edges, len(fused)


def cmd_reconstruct(args, cfg):
    predictor = _predictor(args, cfg)
    ids, pairs = _pairs(args, cfg, "test", args.limit)
    out = _out(args, "runs/reconstruct")
    out.mkdir(parents=True, exist_ok=True)
    e = cfg["eval"]
    n_fused = 0
    for gid, pair in zip(ids, pairs):
        points, colors, edges, k = pair_geometry(pair, predictor(pair), e["theta"], args.fuse_normal_deg,
                                                 args.fuse_offset, e["p_keep"])
        n_fused += k
        write_ply(out / f"pair_{gid:04d}.ply", points, colors, edges)
    print(json.dumps({"out": str(out), "pairs": len(pairs), "fused_planes": n_fused}))


# ---------------------------------------------------------------------------


def cmd_gradcheck(args, cfg):
    results = run_suite(seeds=args.instances, log=_log)
    worst = max(results, key=results.get)
    print(json.dumps({"max_relative_error": results[worst], "worst": worst, "tolerance": TOLERANCE}))
    if results[worst] >= TOLERANCE:
        raise NumericError(f"gradient check failed: {worst} relative error {results[worst]:.3e}")


def _finish(report: ExperimentReport, out: Path, gated: bool = True):
    report.write(out)
    print(report.to_markdown())
    if gated and not report.passed:
        failed = ", ".join(c.name for c in report.criteria if not c.passed)
        raise GateFailure(f"gate failed: {failed}")


def cmd_benchmark(args, cfg):
    model_cfg = _model_cfg(cfg)
    params, _ = _load_model(_need_ckpt(args), model_cfg)
    init = _load_model(args.init_ckpt, model_cfg)[0] if args.init_ckpt else init_params(model_cfg, cfg["seed"])
    _, pairs = _pairs(args, cfg, "test")
    report = run_pose_benchmark(pairs, params, model_cfg, init, cfg["eval"], config_hash(cfg))
    _finish(report, _out(args, "runs/benchmark"))


def cmd_ablations(args, cfg):
    _, model_cfg, tcfg = build_objects(cfg)
    _, train = _pairs(args, cfg, "train")
    _, test = _pairs(args, cfg, "test")
    mono = _load_model(args.mono_ckpt, model_cfg)[0] if args.mono_ckpt else None
    out = _out(args, "runs/ablations")
    report = run_ablations(train, test, model_cfg, tcfg, cfg["eval"], cfg["seed"], mono, out, config_hash(cfg), _log)
    print(report.to_markdown())


def cmd_gate(args, cfg):
    out = _out(args, "runs/gate")
    _finish(run_learning_gate(cfg, out, _log), out)


def cmd_config(args, cfg):
    print(json.dumps(cfg, indent=1))


def cmd_schema(args, cfg):
    print(json.dumps(SCHEMA, indent=1))


COMMANDS = {
    "gen": cmd_gen, "train-mono": cmd_train_mono, "train-pose": cmd_train_pose, "eval": cmd_eval,
    "match": cmd_match, "reconstruct": cmd_reconstruct, "gradcheck": cmd_gradcheck,
    "benchmark": cmd_benchmark, "ablations": cmd_ablations, "gate": cmd_gate,
    "config": cmd_config, "schema": cmd_schema,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (TensorFileError, CheckpointError, OSError) as exc:
        _log(f"I/O error: {exc}")
        return EXIT_IO
    except (NumericError, DomainError, FloatingPointError) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except GateFailure as exc:
        _log(str(exc))
        return EXIT_GATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
