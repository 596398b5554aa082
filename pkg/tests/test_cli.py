import json
import shutil

import numpy as np
import pytest

from planequery import cli
from planequery.errors import NumericError
from planequery.geometry import plane_transform, se3_inverse
from planequery.synth import Dataset
from planequery.tensorfile import load_tensors

TINY = {"dataset": {"n_train": 4, "n_test": 2}, "train": {"mono_epochs": 1, "joint_epochs": 1, "batch_size": 2},
        "eval": {"random_draws": 3}}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train-mono", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "mono")]) == 0
    return root, cfg


def run(work, *args):
    root, cfg = work
    return cli.main([args[0], "--config", str(cfg), *args[1:]])


def test_gen_is_deterministic(work, tmp_path, capsys):
    root, cfg = work
    capsys.readouterr()
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    again = json.loads(capsys.readouterr().out)
    assert again["content_hash"] == Dataset(root / "data").manifest["content_hash"]


def test_training_writes_checkpoint_and_curve(work):
    root, _ = work
    assert (root / "mono" / "checkpoint" / "checkpoint.json").exists()
    lines = (root / "mono" / "loss.csv").read_text().splitlines()
    assert lines[0].startswith("phase,epoch") and len(lines) == 2


def test_train_pose_needs_init_or_from_scratch(work, tmp_path):
    root, _ = work
    data = str(root / "data")
    assert run(work, "train-pose", "--data", data, "--out", str(tmp_path / "p")) == cli.EXIT_IO
    assert run(work, "train-pose", "--data", data, "--init", str(tmp_path / "none"), "--out", str(tmp_path / "p")) \
        == cli.EXIT_IO
    assert run(work, "train-pose", "--data", data, "--init", str(root / "mono" / "checkpoint"),
               "--out", str(tmp_path / "p")) == 0
    assert run(work, "train-pose", "--data", data, "--from-scratch", "--out", str(tmp_path / "q")) == 0
    # an ablation variant can start from the monocular checkpoint
    assert run(work, "train-pose", "--data", data, "--init", str(root / "mono" / "checkpoint"), "--qk-heads", "4",
               "--out", str(tmp_path / "r")) == 0


def test_eval_ground_truth_fixed_points(work, tmp_path):
    root, _ = work
    assert run(work, "eval", "--data", str(root / "data"), "--gt", "--out", str(tmp_path)) == 0
    r = json.loads((tmp_path / "eval.json").read_text())
    assert r["segmentation"] == {"VI": 0.0, "RI": 1.0, "SC": 1.0}
    assert set(r["ap"].values()) == {1.0}
    assert r["pose"]["rot_median"] == 0.0 and r["pose"]["trans_median"] == 0.0
    assert set(r["correspondence"]) == {"0.05", "0.1", "0.2"}
    assert all(c["f_score"] == 1.0 for c in r["correspondence"].values())


def test_eval_theta_and_tier_flags(work, tmp_path):
    root, _ = work
    assert run(work, "eval", "--data", str(root / "data"), "--gt", "--theta", "0.3", "--tier", "20,0.4",
               "--out", str(tmp_path)) == 0
    r = json.loads((tmp_path / "eval.json").read_text())
    assert r["correspondence_theta"] == 0.3 and "0.3" in r["correspondence"]
    assert list(r["ap"]) == ["20deg_0.4m"]


def test_eval_is_bit_reproducible(work, tmp_path):
    root, _ = work
    ck = str(root / "mono" / "checkpoint")
    for d in ("a", "b"):
        assert run(work, "eval", "--data", str(root / "data"), "--ckpt", ck, "--out", str(tmp_path / d)) == 0
    assert (tmp_path / "a" / "eval.json").read_bytes() == (tmp_path / "b" / "eval.json").read_bytes()


def test_match_dumps(work, tmp_path):
    root, _ = work
    assert run(work, "match", "--data", str(root / "data"), "--ckpt", str(root / "mono" / "checkpoint"),
               "--average-directions", "--out", str(tmp_path)) == 0
    summary = json.loads((tmp_path / "matches.json").read_text())
    assert len(summary) == 2
    for entry in summary:
        C = load_tensors(tmp_path / f"pair_{entry['pair']:04d}_C12.bin")[0]
        assert C.shape == (8, 8)
        rows = [a for a, _ in entry["mnn"]]
        assert len(rows) == len(set(rows))


def _read_ply(path):
    lines = path.read_text().splitlines()
    n_v = int(lines[2].split()[-1])
    n_e = int(lines[9].split()[-1])
    start = lines.index("end_header") + 1
    verts = np.array([[float(x) for x in ln.split()] for ln in lines[start : start + n_v]])
    edges = [tuple(map(int, ln.split())) for ln in lines[start + n_v : start + n_v + n_e]]
    return verts, edges


def test_reconstruct_ground_truth_lies_on_gt_planes(work, tmp_path):
    root, _ = work
    assert run(work, "reconstruct", "--data", str(root / "data"), "--gt", "--out", str(tmp_path)) == 0
    ds = Dataset(root / "data")
    for gid in ds.ids("test"):
        verts, edges = _read_ply(tmp_path / f"pair_{gid:04d}.ply")
        assert len(edges) == 16  # two frusta, eight edges each
        pts = verts[:-10, :3]
        frusta = verts[-10:]
        assert np.all(frusta[:, 3:] == 255)
        assert np.allclose(frusta[0, :3], 0.0)
        s = ds.load(gid)
        T12 = se3_inverse(s.relative)
        params = np.vstack([s.views[0].params] + [plane_transform(n, T12) for n in s.views[1].params])
        # every point sits on a ground-truth plane in the view-1 frame (6-decimal PLY precision)
        resid = np.abs(pts @ params.T - 1.0).min(axis=1)
        assert resid.max() < 1e-4
        # a fused plane shares one colour across both views
        n_planes = len(s.views[0].params) + len(s.views[1].params) - len(s.correspondence)
        assert len({tuple(c) for c in verts[:-10, 3:]}) == n_planes


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--instances", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["max_relative_error"] < out["tolerance"] == 1e-4


def test_gradcheck_failure_is_numeric_exit(monkeypatch):
    monkeypatch.setattr(cli, "run_suite", lambda **kw: {"op:matmul": 0.5})
    assert cli.main(["gradcheck"]) == cli.EXIT_NUMERIC


def test_numeric_failure_in_training(work, monkeypatch, tmp_path):
    root, _ = work

    def boom(*a, **k):
        raise NumericError("non-finite gradient")

    monkeypatch.setattr(cli, "run_phase", boom)
    assert run(work, "train-mono", "--data", str(root / "data"), "--out", str(tmp_path)) == cli.EXIT_NUMERIC


def test_config_errors(work, tmp_path):
    root, _ = work
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"batch_size": 0}}))
    assert cli.main(["eval", "--config", str(bad), "--data", str(root / "data"), "--gt"]) == cli.EXIT_CONFIG
    assert run(work, "eval", "--data", str(root / "data"), "--gt", "--qk-heads", "3") == cli.EXIT_CONFIG
    assert run(work, "eval", "--data", str(root / "data")) == cli.EXIT_CONFIG  # needs --ckpt or --gt
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--data", str(root / "data"), "--tier", "nonsense"])
    assert exc.value.code == 2


def test_io_errors(work, tmp_path):
    root, _ = work
    assert run(work, "eval", "--data", str(tmp_path / "missing"), "--gt") == cli.EXIT_IO
    assert run(work, "eval", "--data", str(root / "data"), "--ckpt", str(tmp_path / "nock")) == cli.EXIT_IO
    # corrupt tensor magic in a copy of the dataset
    copy = tmp_path / "copy"
    shutil.copytree(root / "data", copy)
    victim = sorted((copy / "tensors").iterdir())[-1]
    victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
    assert run(work, "eval", "--data", str(copy), "--gt") == cli.EXIT_IO


def test_gate_failure_exit_code(work, tmp_path):
    # one epoch on four pairs cannot pass the learning gate
    assert run(work, "gate", "--out", str(tmp_path)) == cli.EXIT_GATE
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] is False and len(report["criteria"]) == 5


def test_benchmark_and_ablations_commands(work, tmp_path):
    root, _ = work
    ck = str(root / "mono" / "checkpoint")
    assert run(work, "benchmark", "--data", str(root / "data"), "--ckpt", ck, "--out", str(tmp_path / "b")) \
        == cli.EXIT_GATE
    assert (tmp_path / "b" / "report.md").exists()
    assert run(work, "ablations", "--data", str(root / "data"), "--mono-ckpt", ck, "--out", str(tmp_path / "a")) == 0
    assert (tmp_path / "a" / "heatmap_qk_split.bin").exists()


def test_config_and_schema_commands(capsys):
    assert cli.main(["config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["train"]["optimizer"]["paper_ref"]
    assert cli.main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"] == "planequery run configuration"
