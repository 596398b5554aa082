import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cases import graph_grad_error, mono_graph_instance, pose_graph_instance, random_pose
from planequery import diffcore as dc
from planequery.geometry import PoseSE3, quat_from_axis_angle, se3_compose
from planequery.losses import (
    LossWeights,
    ViewTargets,
    cls_loss,
    depth_loss,
    mask_loss,
    match_view,
    mono_loss_graph,
    param_loss,
    pose_loss,
    pose_loss_graph,
    total_mono_loss,
)
from planequery.matching import GtPlane, PlanePrediction

seeds = st.integers(0, 10**6)
W = LossWeights()


def test_default_weights():
    assert (W.lam, W.beta_ce, W.beta_dice, W.lam_t, W.lam_q) == (2.0, 5.0, 5.0, 5.0, 15.0)
    assert W.w_noplane == 0.1 and W.mono_scale_joint == 0.1
    assert all(v > 0 for v in W.to_dict().values())


# ---------------------------------------------------------------------------
# mask / depth / cls / param


def test_mask_loss_perfect_binary():
    y = dc.RngStream(0).uniform(size=30) < 0.5
    assert mask_loss(y.astype(float), y) < 1e-4


def test_mask_loss_disjoint_dice_term():
    y = dc.RngStream(1).uniform(size=30) < 0.5
    only_dice = LossWeights(beta_ce=0.0)
    # clamped logits leave a residual probability of sigmoid(-15) per pixel
    assert abs(mask_loss(1.0 - y, y, only_dice) - 5.0) < 1e-5


@given(seeds)
def test_mask_loss_matches_oracle(seed):
    rng = dc.RngStream(seed)
    m = rng.uniform(0.01, 0.99, size=20)
    y = rng.uniform(size=20) < 0.5
    ce = -np.mean(y * np.log(m) + (1 - y) * np.log(1 - m))
    dice = 1 - 2 * (m * y).sum() / (m.sum() + y.sum() + 1e-6)
    assert abs(mask_loss(m, y) - (5 * ce + 5 * dice)) < 1e-9


def test_mask_loss_logits_and_probabilities_agree():
    rng = dc.RngStream(2)
    x = rng.normal(size=15) * 3
    y = rng.uniform(size=15) < 0.5
    assert abs(mask_loss(x, y, logits=True) - mask_loss(1 / (1 + np.exp(-x)), y)) < 1e-9


def test_depth_loss_examples():
    rng = dc.RngStream(3)
    gt = rng.uniform(1, 3, size=20)
    mask = rng.uniform(size=20) < 0.5
    assert depth_loss(gt, gt, mask) == 0.0
    assert abs(depth_loss(gt + 0.1 * mask + 5.0 * ~mask, gt, mask) - 0.1) < 1e-12
    assert depth_loss(gt + 1.0, gt, np.zeros(20, bool)) == 0.0


def test_cls_loss_perfect():
    assert cls_loss([1.0, 0.0, 1.0], [(0, 0), (2, 1)]) < 1e-5


def test_cls_loss_non_plane_down_weighted():
    # one wrong non-plane slot costs a tenth of one wrong real-plane slot
    wrong_empty = cls_loss([0.5, 0.5], [(0, 0)]) - cls_loss([0.5, 0.0], [(0, 0)])
    wrong_real = cls_loss([0.5, 0.0], [(0, 0)]) - cls_loss([1.0, 0.0], [(0, 0)])
    assert abs(wrong_empty - 0.1 * wrong_real) < 1e-6


def test_param_loss_examples():
    n = np.array([[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]])
    assert param_loss(n, n[::-1], [(0, 1), (1, 0)]) == 0.0
    assert abs(param_loss([[0.1, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [(0, 0)]) - 0.1) < 1e-15
    assert param_loss(n, n, []) == 0.0


# ---------------------------------------------------------------------------
# total mono loss


def _scene(seed, N=5, M=3, P=16):
    rng = dc.RngStream(seed)
    preds = [
        PlanePrediction(float(rng.uniform(0.05, 0.95)), rng.normal(size=3), rng.normal(size=P) * 2,
                        rng.uniform(0, 4, size=P))
        for _ in range(N)
    ]
    gts = [GtPlane(rng.normal(size=3), rng.uniform(size=P) < 0.5, rng.uniform(1, 4, size=P)) for _ in range(M)]
    return preds, gts


def test_total_mono_loss_perfect_limit():
    rng = dc.RngStream(4)
    gts = [GtPlane(rng.normal(size=3), rng.uniform(size=16) < 0.5, rng.uniform(1, 3, size=16)) for _ in range(3)]
    preds = [PlanePrediction(1.0, g.n.copy(), np.where(g.mask, 40.0, -40.0), g.depth.copy()) for g in gts]
    preds.append(PlanePrediction(0.0, np.zeros(3), np.full(16, -40.0), np.zeros(16)))
    assert total_mono_loss(preds, gts).total < 1e-4


@given(seeds)
def test_total_mono_loss_decomposes(seed):
    preds, gts = _scene(seed)
    t = total_mono_loss(preds, gts)
    assert abs(t.total - (2 * t.cls + t.param + t.mask + 2 * t.depth)) < 1e-12
    assert min(t.cls, t.param, t.mask, t.depth) >= 0


@given(seeds, st.permutations(range(5)))
def test_total_mono_loss_prediction_permutation_invariant(seed, perm):
    preds, gts = _scene(seed)
    a = total_mono_loss(preds, gts).total
    b = total_mono_loss([preds[i] for i in perm], gts).total
    assert abs(a - b) < 1e-10


def _heads_and_targets(seed, N=5, M=3, P=16):
    preds, gts = _scene(seed, N, M, P)
    p = np.array([pr.p for pr in preds])
    heads = {
        "p_logits": np.log(p / (1 - p)).reshape(-1, 1),
        "n": np.stack([pr.n for pr in preds]),
        "mask_logits": np.stack([pr.mask_logits for pr in preds]),
        "depth": np.stack([pr.depth for pr in preds]),
    }
    tg = ViewTargets(np.stack([g.n for g in gts]), np.stack([g.mask for g in gts]), np.stack([g.depth for g in gts]))
    return preds, gts, heads, tg


@given(seeds)
def test_mono_graph_matches_numpy_reference(seed):
    preds, gts, heads, tg = _heads_and_targets(seed)
    assignment = match_view(heads["p_logits"], heads["n"], heads["mask_logits"], heads["depth"], tg)
    ref = total_mono_loss(preds, gts, assignment=assignment)
    g = dc.Graph()
    total, terms = mono_loss_graph(g, {k: g.const(v) for k, v in heads.items()}, tg, assignment)
    assert abs(float(total.value) - ref.total) < 1e-9
    assert abs(float(terms["cls"].value) - ref.cls) < 1e-9
    assert abs(float(terms["mask"].value) - ref.mask) < 1e-9
    assert abs(float(terms["depth"].value) - ref.depth) < 1e-12
    assert abs(float(terms["param"].value) - ref.param) < 1e-12


def test_match_view_agrees_with_bipartite_match():
    from planequery.matching import bipartite_match

    preds, gts, heads, tg = _heads_and_targets(8)
    assert match_view(heads["p_logits"], heads["n"], heads["mask_logits"], heads["depth"], tg) == \
        bipartite_match(preds, gts)


def test_match_view_too_many_planes():
    _, _, heads, tg = _heads_and_targets(9, N=2, M=3)
    with pytest.raises(ValueError):
        match_view(heads["p_logits"], heads["n"], heads["mask_logits"], heads["depth"], tg)


def test_mono_graph_without_planes_is_cls_only():
    _, _, heads, tg = _heads_and_targets(10)
    empty = ViewTargets(np.zeros((0, 3)), np.zeros((0, 16), bool), np.zeros((0, 16)))
    g = dc.Graph()
    total, terms = mono_loss_graph(g, {k: g.const(v) for k, v in heads.items()}, empty, [])
    assert abs(float(total.value) - 2 * cls_loss(1 / (1 + np.exp(-heads["p_logits"])), [])) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_mono_loss_grad_check(seed):
    g, loss = mono_graph_instance(seed)
    assert graph_grad_error(g, loss, seed=seed) <= 1e-4


# ---------------------------------------------------------------------------
# pose loss


def test_pose_loss_zero_at_truth():
    T = random_pose(dc.RngStream(5))
    assert pose_loss(T, T) < 1e-12


def test_pose_loss_translation_example():
    T_gt = random_pose(dc.RngStream(6))
    # error expressed in the predicted frame: T^-1 T_gt is a pure 0.1 m translation
    T = se3_compose(T_gt, PoseSE3(np.array([1.0, 0, 0, 0]), np.array([-0.1, 0.0, 0.0])))
    assert abs(pose_loss(T, T_gt) - 0.5) < 1e-12
    assert abs(pose_loss(PoseSE3.identity(), PoseSE3(np.array([1.0, 0, 0, 0]), np.array([0.1, 0, 0]))) - 0.5) < 1e-15


def test_pose_loss_rotation_example():
    T_gt = PoseSE3(quat_from_axis_angle([0, 0, 1], 0.2), np.zeros(3))
    assert abs(pose_loss(PoseSE3.identity(), T_gt) - 3.0) < 1e-12


@given(seeds, seeds)
def test_pose_loss_symmetric(s1, s2):
    a, b = random_pose(dc.RngStream(s1)), random_pose(dc.RngStream(s2))
    assert abs(pose_loss(a, b) - pose_loss(b, a)) < 1e-10
    assert pose_loss(a, b) >= 0


@given(seeds, seeds)
def test_pose_graph_matches_numpy_reference(s1, s2):
    T, T_gt = random_pose(dc.RngStream(s1)), random_pose(dc.RngStream(s2))
    g = dc.Graph()
    loss = pose_loss_graph(g, g.const(T.q.reshape(1, 4)), g.const(T.t.reshape(1, 3)), T_gt)
    assert abs(float(loss.value) - pose_loss(T, T_gt)) < 1e-9


def test_pose_graph_sign_invariant():
    rng = dc.RngStream(7)
    T, T_gt = random_pose(rng), random_pose(rng)
    vals = []
    for s in (1.0, -1.0):
        g = dc.Graph()
        vals.append(float(pose_loss_graph(g, g.const(s * T.q.reshape(1, 4)), g.const(T.t.reshape(1, 3)), T_gt).value))
    assert abs(vals[0] - vals[1]) < 1e-12


def test_pose_graph_at_truth_is_finite_zero():
    T = random_pose(dc.RngStream(8))
    g = dc.Graph()
    q = g.param("q", T.q.reshape(1, 4))
    t = g.param("t", T.t.reshape(1, 3))
    loss = pose_loss_graph(g, q, t, T)
    grads = dc.backward(g, loss)
    assert float(loss.value) < 1e-10
    assert all(np.all(np.isfinite(v)) for v in grads.values())


@pytest.mark.parametrize("seed", range(10))
def test_pose_loss_grad_check_direct(seed):
    rng = dc.RngStream(seed, 5)
    T, T_gt = random_pose(rng, max_angle=2.5), random_pose(rng, max_angle=2.5)
    g = dc.Graph()
    q = g.param("q", T.q.reshape(1, 4))
    t = g.param("t", T.t.reshape(1, 3))
    loss = pose_loss_graph(g, q, t, T_gt)
    assert max(dc.grad_check_all(g, loss, coords=None).values()) <= 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_pose_loss_grad_check_end_to_end(seed):
    g, loss = pose_graph_instance(seed)
    assert graph_grad_error(g, loss, seed=seed) <= 1e-4


def test_pose_loss_uses_weights():
    T_gt = PoseSE3(quat_from_axis_angle([1, 0, 0], 0.3), np.array([0.0, 0.2, 0.0]))
    G = W.lam_t, W.lam_q
    a = pose_loss(PoseSE3.identity(), T_gt, LossWeights(lam_t=1.0, lam_q=0.0))
    b = pose_loss(PoseSE3.identity(), T_gt, LossWeights(lam_t=0.0, lam_q=1.0))
    assert abs(b - 0.3) < 1e-12
    assert abs(pose_loss(PoseSE3.identity(), T_gt) - (G[0] * a + G[1] * b)) < 1e-12
    assert math.isfinite(a) and a > 0
