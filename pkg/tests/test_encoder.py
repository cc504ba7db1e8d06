from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damagelab.encoder import (
    Encoder,
    LoraAdapter,
    PatchGeometry,
    PrecomputedEncoder,
    ProjectionWeights,
    embed,
    embed_tensor,
    gram_loss,
    load_tokens,
    patchify,
    save_tokens,
    standardize,
    tokens_to_pixels,
)


def test_patchify_order_is_row_major_over_the_grid():
    g = PatchGeometry(4, 6, 2, 2)
    image = np.arange(4 * 6 * 2, dtype=float).reshape(4, 6, 2)
    rows = patchify(image, g)
    assert rows.shape == (6, 8)
    # patch (1, 2) covers rows 2..3, cols 4..5
    np.testing.assert_array_equal(rows[1 * 3 + 2], image[2:4, 4:6].ravel())


def test_geometry_rejects_non_dividing_patch():
    with pytest.raises(ValueError, match="P must divide"):
        PatchGeometry(30, 32, 3, 4)
    with pytest.raises(ValueError, match="does not match geometry"):
        patchify(np.zeros((8, 8, 3)), PatchGeometry(16, 16, 3, 4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([4, 8, 16]))
def test_tokens_are_unit_norm(seed, D):
    rng = np.random.default_rng(seed)
    enc = Encoder.create(PatchGeometry(8, 8, 3, 4), D, seed % 97)
    grid = enc.token_grid(rng.random((8, 8, 3)))
    assert grid.shape == (2, 2, D)
    np.testing.assert_allclose(np.linalg.norm(grid, axis=-1), 1.0, atol=1e-5)


def test_zero_b_adapter_is_exact_identity():
    g = PatchGeometry(16, 16, 3, 4)
    w = ProjectionWeights.init(g, 16, 3)
    image = np.random.default_rng(0).random((16, 16, 3))
    base = Encoder(g, w).token_grid(image)
    ad = LoraAdapter.init(g.patch_dim, 16, 4, seed=11)
    assert ad.A.any()  # A is random, B is zero
    assert not ad.B.any()
    assert np.array_equal(Encoder(g, w, ad).token_grid(image), base)
    assert ad.n_params == 4 * (16 + g.patch_dim)


def test_embed_tensor_matches_numpy_path():
    rng = np.random.default_rng(2)
    g = PatchGeometry(8, 8, 3, 4)
    w = ProjectionWeights(rng.normal(size=(48, 8)), 0)
    ad = LoraAdapter(rng.normal(size=(2, 48)), rng.normal(size=(8, 2)), 0.5)
    patches = rng.normal(size=(4, 48))
    np.testing.assert_allclose(embed_tensor(patches, w.E, ad.A, ad.B, 0.5).data, embed(patches, w, ad), atol=1e-12)


def test_standardize_uses_channel_statistics():
    x = np.full((2, 2, 3), 0.485)
    x[..., 1] = 0.456 + 0.224
    out = standardize(x)
    np.testing.assert_allclose(out[..., 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(out[..., 1], 1.0, atol=1e-12)
    # channels beyond RGB pass through
    np.testing.assert_array_equal(standardize(np.ones((1, 1, 4)))[..., 3], 1.0)


def test_projection_is_seeded_and_float32():
    g = PatchGeometry(8, 8, 3, 4)
    a, b = ProjectionWeights.init(g, 8, 5), ProjectionWeights.init(g, 8, 5)
    assert a.E.dtype == np.float32
    assert np.array_equal(a.E, b.E)
    assert not np.array_equal(a.E, ProjectionWeights.init(g, 8, 6).E)


def test_gram_loss_is_rotation_invariant_and_zero_on_self():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(6, 4))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert gram_loss(t, t) == 0.0
    assert gram_loss(t, t @ q) == pytest.approx(0.0, abs=1e-10)
    s = rng.normal(size=(6, 4))
    expected = sum((float(t[i] @ t[j]) - float(s[i] @ s[j])) ** 2 for i in range(6) for j in range(6))
    assert gram_loss(t, s) == pytest.approx(expected, rel=1e-12)


def test_tokens_to_pixels_replicates_each_token():
    g = PatchGeometry(4, 4, 1, 2)
    tok = np.arange(8, dtype=float).reshape(4, 2)
    px = tokens_to_pixels(tok, g)
    assert px.shape == (4, 4, 2)
    np.testing.assert_array_equal(px[3, 0], tok[2])


def test_token_file_round_trip(tmp_path):
    g = PatchGeometry(8, 8, 3, 4)
    tokens = {"a": np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)}
    save_tokens(tmp_path / "t.ckpt", tokens)
    back = load_tokens(tmp_path / "t.ckpt")
    np.testing.assert_array_equal(back["a"], tokens["a"])
    enc = PrecomputedEncoder(g, back)
    assert enc.grid_for("a").shape == (2, 2, 6)
    with pytest.raises(KeyError):
        enc.grid_for("b")
