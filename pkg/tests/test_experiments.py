import json

import numpy as np
import pytest

from planequery.config import build_objects, default_config
from planequery.experiments import (
    Criterion,
    ExperimentReport,
    build_pairs,
    identity_baseline,
    run_ablations,
    run_learning_gate,
    run_pose_benchmark,
)
from planequery.model import init_params
from planequery.tensorfile import load_tensors


def tiny_config():
    cfg = default_config()
    cfg["dataset"].update(n_train=6, n_test=3)
    cfg["train"].update(mono_epochs=1, joint_epochs=1, batch_size=3)
    cfg["eval"]["random_draws"] = 4
    return cfg


def test_criterion_comparisons():
    assert Criterion.check("a", "", 1.0, 1.0, "<=").passed
    assert not Criterion.check("a", "", 1.5, 1.0, "<=").passed
    assert Criterion.check("b", "", 3.0, 2.0, ">=").passed
    assert not Criterion.check("b", "", 1.0, 2.0, ">=").passed


def test_report_serialization():
    r = ExperimentReport("demo", "abc", {"x": 1.0}, {"y": 2.0},
                         [Criterion.check("x", "x small", 1.0, 2.0, "<="), Criterion.check("z", "z big", 0.0, 1.0, ">=")],
                         ["something flagged"], {"table": [{"variant": "full", "F": 0.5}]}, {"total": 3.0})
    d = json.loads(r.to_json())
    assert d["passed"] is False and d["config_hash"] == "abc"
    assert [c["measured"] for c in d["criteria"]] == [1.0, 0.0]
    assert [c["threshold"] for c in d["criteria"]] == [2.0, 1.0]
    assert "timing" not in json.loads(r.to_json(with_timing=False))
    md = r.to_markdown()
    assert "| x: x small | 1 | <= 2 | pass |" in md and "FAIL" in md
    assert "something flagged" in md and "| full | 0.5 |" in md


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_config()
    gen, model, train = build_objects(cfg)
    return cfg, model, train, build_pairs(gen, 4, "train", 0.05), build_pairs(gen, 3, "test", 0.05)


def test_benchmark_thresholds_follow_baselines(tiny):
    cfg, model, _, _, test = tiny
    params = init_params(model, 0)
    r = run_pose_benchmark(test, params, model, params, cfg["eval"])
    crit = {c.name: c for c in r.criteria}
    base = r.baselines
    assert crit["pose_loss"].threshold == 0.5 * base["untrained"]["pose_loss"]
    assert crit["rot_median"].threshold == 0.5 * base["identity_pose"]["rot_median"]
    assert crit["trans_median"].threshold == 0.5 * base["identity_pose"]["trans_median"]
    assert crit["f_score"].threshold == 3.0 * base["random_matching"]["f_score"]
    assert crit["plane_recall"].threshold == 2.0 * base["untrained"]["plane_recall_0.6m"]
    # the untrained model predicts the identity pose, so it cannot halve the identity baseline
    assert r.values["pose"]["rot_median"] == pytest.approx(base["identity_pose"]["rot_median"], abs=1e-9)
    assert not crit["pose_loss"].passed and not r.passed
    assert base["identity_pose"] == identity_baseline(test)


def test_learning_gate_is_bit_reproducible(tmp_path):
    cfg = tiny_config()
    a = run_learning_gate(cfg, tmp_path / "a")
    b = run_learning_gate(cfg, tmp_path / "b")
    assert a.to_json(with_timing=False) == b.to_json(with_timing=False)
    assert len(a.criteria) == 5
    for name in ("report.json", "report.md", "loss.csv", "checkpoint/checkpoint.json"):
        assert (tmp_path / "a" / name).exists()


def test_ablations_report_and_heatmaps(tiny, tmp_path):
    cfg, model, train_cfg, train, test = tiny
    r = run_ablations(train, test, model, train_cfg, cfg["eval"], out_dir=tmp_path)
    rows = r.extra["table"]
    assert [row["variant"] for row in rows] == ["full", "no_ce", "qk_split", "v1"]
    assert [(row["CE"], row["QKNum"], row["VNum"]) for row in rows] == [
        ("yes", 1, 4), ("no", 1, 4), ("yes", 4, 4), ("yes", 1, 1)]
    assert not r.criteria and r.passed  # directionality is flagged, never gated
    full = load_tensors(tmp_path / "heatmap_full.bin")[0]
    split = load_tensors(tmp_path / "heatmap_qk_split.bin")[0]
    n = model.n_queries
    assert full.shape == (1, n, n) and split.shape == (4, n, n)
    # dual-softmax entries are probabilities
    assert np.all((split >= 0) & (split <= 1))
    assert (tmp_path / "ablations.md").read_text().count("\n| ") >= 5
    for flag in r.flags:
        assert flag.startswith("full F-score")
