import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planequery import diffcore as dc
from planequery.attention import (
    ABLATIONS,
    AttentionConfig,
    ablation_variants,
    dual_softmax_graph,
    init_mca,
    init_pca,
    init_pose_module,
    mca,
    pca,
    pose_module_forward,
)
from planequery.errors import ConfigError, ShapeError
from planequery.matching import dual_softmax_from_similarity

seeds = st.integers(0, 10**6)


def _lin(params, prefix, x):
    return x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mca_oracle(params, prefix, Xq, Xkv, heads):
    Q, K, V = (_lin(params, f"{prefix}.{p}", x) for p, x in (("q", Xq), ("k", Xkv), ("v", Xkv)))
    d = Q.shape[1] // heads
    parts = [
        _softmax_rows(Q[:, h * d:(h + 1) * d] @ K[:, h * d:(h + 1) * d].T / math.sqrt(d)) @ V[:, h * d:(h + 1) * d]
        for h in range(heads)
    ]
    return _lin(params, f"{prefix}.o", np.concatenate(parts, axis=1))


def pca_oracle(params, prefix, E_i, E_j, cfg):
    """Per-head (v_i^h)^T C v_j^h with C from an unsplit or split dual softmax."""
    Q, K = _lin(params, f"{prefix}.q", E_i), _lin(params, f"{prefix}.k", E_j)
    Vl = _lin(params, f"{prefix}.vl", E_i)
    Vr = _lin(params, f"{prefix}.vr", E_j if cfg.cross_embeddings else E_i)
    d = cfg.head_dim
    out = []
    for h in range(cfg.v_heads):
        sl = slice(h * d, (h + 1) * d)
        if cfg.qk_heads == 1:
            C = dual_softmax_from_similarity(Q @ K.T, 1 / math.sqrt(cfg.channels))
        else:
            C = dual_softmax_from_similarity(Q[:, sl] @ K[:, sl].T, 1 / math.sqrt(d))
        out.append(Vl[:, sl].T @ C @ Vr[:, sl])
    return np.stack(out)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(channels=64, v_heads=5)
    with pytest.raises(ConfigError):
        AttentionConfig(channels=64, v_heads=4, qk_heads=2)
    assert AttentionConfig().feature_dims == (4, 16, 16)
    assert AttentionConfig(v_heads=1).feature_dims == (1, 64, 64)


# ---------------------------------------------------------------------------
# mca


def _mca_setup(seed, C=16, Nq=3, Nk=7):
    rng = dc.RngStream(seed)
    params = {}
    init_mca(params, rng.child(0), "a", C)
    return params, rng.normal(size=(Nq, C)), rng.normal(size=(Nk, C))


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_mca_matches_oracle(heads):
    params, Xq, Xkv = _mca_setup(heads)
    g = dc.Graph()
    out = mca(g, params, "a", g.const(Xq), g.const(Xkv), heads)
    assert np.allclose(out.value, mca_oracle(params, "a", Xq, Xkv, heads), atol=1e-12)


def test_mca_identical_keys_attend_uniformly():
    params, Xq, Xkv = _mca_setup(1, Nq=1)
    Xkv = np.repeat(Xkv[:1], 5, axis=0)
    g = dc.Graph()
    out = mca(g, params, "a", g.const(Xq), g.const(Xkv), 4).value
    v_mean = _lin(params, "a.v", Xkv).mean(axis=0, keepdims=True)
    assert np.allclose(out, _lin(params, "a.o", v_mean), atol=1e-12)


def test_mca_shape_contract():
    params, _, _ = _mca_setup(2, C=64)
    rng = dc.RngStream(3)
    g = dc.Graph()
    out = mca(g, params, "a", g.const(rng.normal(size=(4, 64))), g.const(rng.normal(size=(10, 64))), 4)
    assert out.shape == (4, 64)


def test_mca_shape_errors():
    params, Xq, Xkv = _mca_setup(4)
    g = dc.Graph()
    with pytest.raises(ShapeError):
        mca(g, params, "a", g.const(Xq), g.const(Xkv[:, :8]), 2)
    with pytest.raises(ShapeError):
        mca(g, params, "a", g.const(Xq), g.const(Xkv), 3)


@pytest.mark.parametrize("heads", [1, 4])
def test_mca_grad_check(heads):
    rng = dc.RngStream(5)
    params, Xq, Xkv = _mca_setup(5)
    g = dc.Graph()
    q = g.param("xq", Xq)
    kv = g.param("xkv", Xkv)
    out = mca(g, params, "a", q, kv, heads)
    loss = dc.sum_(out * g.const(rng.normal(size=out.shape)))
    assert max(dc.grad_check_all(g, loss, coords=4).values()) <= 1e-4


# ---------------------------------------------------------------------------
# pca


def _pca_setup(seed, cfg, N1=8, N2=8):
    rng = dc.RngStream(seed)
    params = {}
    init_pca(params, rng.child(0), "p", cfg)
    return params, rng.normal(size=(N1, cfg.channels)), rng.normal(size=(N2, cfg.channels))


CONFIGS = [
    AttentionConfig(64, 4, 1),
    AttentionConfig(64, 4, 4),
    AttentionConfig(64, 1, 1),
    AttentionConfig(64, 4, 1, cross_embeddings=False),
    AttentionConfig(16, 2, 2),
]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"C{c.channels}-V{c.v_heads}-QK{c.qk_heads}-X{int(c.cross_embeddings)}")
def test_pca_matches_oracle(cfg):
    params, E1, E2 = _pca_setup(7, cfg, 8, 8)
    g = dc.Graph()
    out = pca(g, params, "p", g.const(E1), g.const(E2), cfg)
    fmap = out.feature_map(cfg)
    assert fmap.shape == cfg.feature_dims
    assert np.allclose(fmap, pca_oracle(params, "p", E1, E2, cfg), atol=1e-10)
    assert len(out.C) == cfg.qk_heads
    assert out.projected.shape == (1, cfg.channels)


def test_pca_feature_dims_default():
    cfg = AttentionConfig()
    params, E1, E2 = _pca_setup(8, cfg)
    g = dc.Graph()
    assert pca(g, params, "p", g.const(E1), g.const(E2), cfg).feature_map(cfg).shape == (4, 16, 16)


def test_pca_split_qk_builds_one_matrix_per_head():
    cfg = AttentionConfig(64, 4, 4)
    params, E1, E2 = _pca_setup(9, cfg, 5, 6)
    g = dc.Graph()
    out = pca(g, params, "p", g.const(E1), g.const(E2), cfg)
    assert len(out.C) == 4 and all(c.shape == (5, 6) for c in out.C)


def test_pca_value_heads_one():
    cfg = AttentionConfig(64, 1, 1)
    params, E1, E2 = _pca_setup(10, cfg)
    g = dc.Graph()
    assert pca(g, params, "p", g.const(E1), g.const(E2), cfg).feature_map(cfg).shape == (1, 64, 64)


def test_pca_hard_identity_correspondence():
    cfg = AttentionConfig(16, 2, 1)
    params, _, _ = _pca_setup(11, cfg)
    # orthonormal plane embeddings and sharp, matched query/key maps
    E = np.eye(16)[:4]
    params["p.q.W"] = 60.0 * np.eye(16)
    params["p.k.W"] = 60.0 * np.eye(16)
    params["p.q.b"] = np.zeros((1, 16))
    params["p.k.b"] = np.zeros((1, 16))
    g = dc.Graph()
    out = pca(g, params, "p", g.const(E), g.const(E), cfg)
    assert np.allclose(out.C[0].value, np.eye(4), atol=1e-12)
    Vl, Vr = _lin(params, "p.vl", E), _lin(params, "p.vr", E)
    d = cfg.head_dim
    want = np.stack([
        sum(np.outer(Vl[m, h * d:(h + 1) * d], Vr[m, h * d:(h + 1) * d]) for m in range(4)) for h in range(2)
    ])
    assert np.allclose(out.feature_map(cfg), want, atol=1e-10)


@given(seeds, st.permutations(range(5)), st.permutations(range(6)))
def test_pca_invariant_to_plane_order(seed, p1, p2):
    cfg = AttentionConfig(16, 4, 1)
    params, E1, E2 = _pca_setup(seed, cfg, 5, 6)
    g = dc.Graph()
    a = pca(g, params, "p", g.const(E1), g.const(E2), cfg)
    b = pca(g, params, "p", g.const(E1[list(p1)]), g.const(E2[list(p2)]), cfg)
    assert np.allclose(a.feature.value, b.feature.value, atol=1e-12)
    assert np.allclose(b.C[0].value, a.C[0].value[np.ix_(p1, p2)], atol=1e-15)


@given(seeds)
def test_pca_correspondence_reconstructable(seed):
    cfg = AttentionConfig(16, 2, 1)
    params, E1, E2 = _pca_setup(seed, cfg, 4, 3)
    g = dc.Graph()
    out = pca(g, params, "p", g.const(E1), g.const(E2), cfg)
    C = out.C[0].value
    assert np.allclose(C, dual_softmax_from_similarity(out.S[0].value, 1 / 4.0), atol=1e-15)
    assert np.all((C > 0) & (C < 1))


def test_pca_same_image_placement():
    cfg = AttentionConfig(16, 2, 1, cross_embeddings=False)
    params, E1, E2 = _pca_setup(12, cfg, 4, 4)
    g = dc.Graph()
    out = pca(g, params, "p", g.const(E1), g.const(E2), cfg)
    # both value sides come from the first view
    Vl, Vr = _lin(params, "p.vl", E1), _lin(params, "p.vr", E1)
    C = out.C[0].value
    assert np.allclose(out.feature_map(cfg)[0], Vl[:, :8].T @ C @ Vr[:, :8], atol=1e-12)
    with pytest.raises(ShapeError):
        pca(g, params, "p", g.const(E1), g.const(E2[:3]), cfg)


def test_pca_channel_mismatch():
    cfg = AttentionConfig(16, 2, 1)
    params, E1, E2 = _pca_setup(13, cfg)
    g = dc.Graph()
    with pytest.raises(ShapeError):
        pca(g, params, "p", g.const(E1[:, :8]), g.const(E2), cfg)


def test_dual_softmax_graph_channel_mismatch():
    g = dc.Graph()
    with pytest.raises(ShapeError):
        dual_softmax_graph(g, g.const(np.ones((2, 3))), g.const(np.ones((2, 4))))


@pytest.mark.parametrize("cfg", [AttentionConfig(16, 4, 1), AttentionConfig(16, 4, 4), AttentionConfig(16, 1, 1)])
def test_pca_grad_check(cfg):
    rng = dc.RngStream(14)
    params, E1, E2 = _pca_setup(14, cfg, 4, 5)
    g = dc.Graph()
    out = pca(g, params, "p", g.param("e1", E1), g.param("e2", E2), cfg)
    loss = dc.sum_(out.projected * g.const(rng.normal(size=(1, 16))))
    assert max(dc.grad_check_all(g, loss, coords=4).values()) <= 1e-4


# ---------------------------------------------------------------------------
# pose module


def _pose_setup(seed, cfg=AttentionConfig(16, 4, 1), perturb=True):
    rng = dc.RngStream(seed)
    params = {}
    init_pose_module(params, rng.child(0), cfg)
    if perturb:
        params["pose.mlp.out.W"] = rng.normal(0, 1.0, size=params["pose.mlp.out.W"].shape)
        params["pose.mlp.out.b"] = rng.normal(size=(1, 7))
    return params, rng.normal(size=(5, cfg.channels)), rng.normal(size=(4, cfg.channels))


def test_pose_module_initial_output_is_identity():
    cfg = AttentionConfig(16, 4, 1)
    params, E1, E2 = _pose_setup(0, cfg, perturb=False)
    g = dc.Graph()
    out = pose_module_forward(g, params, g.const(E1), g.const(E2), cfg)
    assert np.array_equal(out.t.value, np.zeros((1, 3)))
    assert np.allclose(out.q.value, [[1.0, 0.0, 0.0, 0.0]], atol=0)


@given(seeds)
def test_pose_module_unit_canonical_quaternion(seed):
    cfg = AttentionConfig(16, 4, 1)
    params, E1, E2 = _pose_setup(seed, cfg)
    g = dc.Graph()
    out = pose_module_forward(g, params, g.const(E1), g.const(E2), cfg)
    q = out.q.value.reshape(4)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9 and q[0] >= 0
    assert out.C12.shape == (5, 4) and out.C21.shape == (4, 5)
    assert np.allclose(out.pose.q, q, atol=1e-15)


def test_pose_module_grad_check():
    cfg = AttentionConfig(16, 4, 1)
    params, E1, E2 = _pose_setup(3, cfg)
    rng = dc.RngStream(4)
    g = dc.Graph()
    out = pose_module_forward(g, params, g.param("e1", E1), g.param("e2", E2), cfg)
    w = g.const(rng.normal(size=(1, 4)))
    loss = dc.sum_(out.q * w) + dc.sum_(out.t * g.const(rng.normal(size=(1, 3))))
    assert max(dc.grad_check_all(g, loss, coords=3).values()) <= 1e-4


def test_ablation_variants_one_axis_each():
    base = AttentionConfig()
    v = ablation_variants(base)
    assert tuple(v) == ABLATIONS and v["full"] == base
    assert v["no_ce"] == AttentionConfig(64, 4, 1, False)
    assert v["qk_split"] == AttentionConfig(64, 4, 4, True)
    assert v["v1"] == AttentionConfig(64, 1, 1, True)
    with pytest.raises(ConfigError):
        ablation_variants(AttentionConfig(64, 1, 1))


def test_ablation_variant_shapes():
    rng = dc.RngStream(12)
    E1, E2 = rng.normal(size=(8, 64)), rng.normal(size=(8, 64))
    counts, fmaps = {}, {}
    for name, cfg in ablation_variants(AttentionConfig()).items():
        params = {}
        init_pose_module(params, rng.child(len(counts)), cfg)
        g = dc.Graph()
        out = pose_module_forward(g, params, g.const(E1), g.const(E2), cfg)
        counts[name] = len(out.out12.C)
        fmaps[name] = out.out12.feature_map(cfg).shape
        # the reported matrix is the mean over query/key heads
        want = sum(c.value for c in out.out12.C) / len(out.out12.C)
        assert np.allclose(out.C12, want, atol=1e-15)
    assert counts == {"full": 1, "no_ce": 1, "qk_split": 4, "v1": 1}
    assert fmaps["v1"] == (1, 64, 64) and fmaps["full"] == (4, 16, 16)
