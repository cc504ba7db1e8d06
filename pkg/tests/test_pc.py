from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from damagelab import diffcore as dc
from damagelab.pc import (
    PrototypeError,
    PrototypeSet,
    PseudoLabelMap,
    assign_pseudo_labels,
    build_prototypes,
    load_prototypes,
    minibatch_kmeans,
    pc_loss,
    pixel_stream,
    save_prototypes,
)


def _blobs(rng, centers, n, spread):
    x = np.concatenate([c + spread * rng.normal(size=(n, len(c))) for c in centers])
    return x[rng.permutation(len(x))]


@pytest.mark.parametrize("seed", range(5))
def test_minibatch_kmeans_agrees_with_lloyd(seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(4, 3)) * 5
    x = _blobs(rng, centers, 300, 0.3)
    got = minibatch_kmeans(x, 4, seed, batch_size=128, passes=3)
    ref, ref_inertia = oracles.lloyd(x, got)
    # mini-batch result is (close to) a Lloyd fixed point with the same inertia
    assert oracles.inertia(x, got) <= ref_inertia * 1.01
    order = oracles.nearest(centers, got)
    assert sorted(order.tolist()) == [0, 1, 2, 3]
    np.testing.assert_allclose(got[order], centers, atol=0.1)


def test_minibatch_kmeans_weights_act_like_repetition():
    """With one batch and one pass, each centroid ends at the weighted mean of its members."""
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 20])
    w = rng.integers(1, 5, size=len(x)).astype(float)
    c = minibatch_kmeans(x, 2, 0, w, batch_size=len(x), passes=1)
    for k in range(2):
        sel = oracles.nearest(x, c) == k
        np.testing.assert_allclose(c[k], np.average(x[sel], axis=0, weights=w[sel]), atol=1e-12)


def test_minibatch_kmeans_is_seeded_and_order_sensitive():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(500, 4))
    a = minibatch_kmeans(x, 8, 3, batch_size=64)
    assert np.array_equal(a, minibatch_kmeans(x, 8, 3, batch_size=64))
    assert not np.array_equal(a, minibatch_kmeans(x, 8, 4, batch_size=64))


def test_kmeans_handles_duplicate_points():
    x = np.zeros((10, 2))
    x[5:] = 1.0
    c = minibatch_kmeans(x, 4, 0)
    assert c.shape == (4, 2) and np.isfinite(c).all()
    with pytest.raises(PrototypeError, match="at least K"):
        minibatch_kmeans(x, 11, 0)


def test_pixel_stream_weights_equal_pixel_counts():
    rng = np.random.default_rng(0)
    P = 2
    grids = [rng.normal(size=(2, 3, 4)) for _ in range(2)]
    masks = [rng.integers(0, 2, size=(4, 6)).astype(np.uint8) for _ in range(2)]
    emb, lab, w = pixel_stream(grids, masks, P)
    # oracle: expand every pixel and compare per-class sums and counts
    px_emb, px_lab = [], []
    for g, m in zip(grids, masks):
        for r in range(4):
            for c in range(6):
                px_emb.append(g[r // P, c // P])
                px_lab.append(m[r, c])
    px_emb, px_lab = np.array(px_emb), np.array(px_lab)
    for cls in (0, 1):
        assert w[lab == cls].sum() == (px_lab == cls).sum()
        np.testing.assert_allclose((w[lab == cls, None] * emb[lab == cls]).sum(0), px_emb[px_lab == cls].sum(0), atol=1e-12)
    assert (w > 0).all()


def test_build_prototypes_shapes_and_errors():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(200, 5)).astype(np.float32)
    lab = (np.arange(200) % 4 == 0).astype(int)
    p = build_prototypes(emb, lab, 4, 6, seed=1)
    assert (p.K_pos, p.K_neg, p.D) == (4, 6, 5)
    assert p.positives.dtype == np.float32
    with pytest.warns(UserWarning, match="reducing K"):
        p = build_prototypes(emb, lab, 64, 6, seed=1)
    assert p.K_pos == 50
    with pytest.raises(PrototypeError, match="positive"):
        build_prototypes(emb, np.zeros(200, dtype=int), 2, 2)


def test_prototype_file_round_trip(tmp_path):
    p = PrototypeSet(np.ones((2, 3), np.float32), np.zeros((4, 3), np.float32))
    save_prototypes(tmp_path / "p.ckpt", p)
    back = load_prototypes(tmp_path / "p.ckpt")
    assert back.tobytes() == p.tobytes()


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
def test_pseudo_labels_match_brute_force(seed, k_pos, k_neg, D):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(1, 6, size=2)
    pos, neg = rng.normal(size=(k_pos, D)), rng.normal(size=(k_neg, D))
    feats = rng.normal(size=(H, W, D))
    gt = rng.integers(0, 2, size=(H, W))
    got = assign_pseudo_labels(feats, PrototypeSet(pos, neg), gt)
    idx = oracles.nearest(feats, np.concatenate([pos, neg]))
    y = (idx < k_pos).astype(np.uint8)
    assert np.array_equal(got.y_proto, y)
    assert np.array_equal(got.reliable, y == gt)


def test_pseudo_label_ties_go_to_positive():
    p = PrototypeSet(np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]]))
    got = assign_pseudo_labels(np.zeros((1, 1, 2)), p, np.zeros((1, 1)))
    assert got.y_proto[0, 0] == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_pc_loss_is_masked_mean_bce(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 3, 3)
    prob = rng.random(shape)
    y = rng.integers(0, 2, size=shape).astype(np.uint8)
    rel = rng.random(shape) < 0.5
    got = pc_loss(prob, PseudoLabelMap(y, rel)).item()
    terms = [
        -(math.log(min(max(p, 1e-7), 1 - 1e-7)) if t else math.log(1 - min(max(p, 1e-7), 1 - 1e-7)))
        for p, t, r in zip(prob.ravel(), y.ravel(), rel.ravel())
        if r
    ]
    expected = sum(terms) / len(terms) if terms else 0.0
    assert abs(got - expected) <= 1e-10


def test_pc_loss_empty_omega_is_zero_without_gradient():
    prob = dc.Tensor(np.full((1, 2, 2), 0.3), requires_grad=True)
    pseudo = PseudoLabelMap(np.ones((1, 2, 2), np.uint8), np.zeros((1, 2, 2), bool))
    loss = pc_loss(prob, pseudo)
    assert loss.item() == 0.0
    assert not loss.requires_grad


def test_pc_loss_gradient_only_on_reliable_pixels():
    prob = dc.Tensor(np.full((1, 2, 2), 0.3), requires_grad=True)
    rel = np.array([[[True, False], [False, True]]])
    dc.tensor.backward(pc_loss(prob, PseudoLabelMap(np.ones((1, 2, 2), np.uint8), rel)))
    assert np.all(prob.grad[~rel] == 0) and np.all(prob.grad[rel] < 0)
