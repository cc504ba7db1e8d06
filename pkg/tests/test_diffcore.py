from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from damagelab import diffcore as dc
from damagelab.diffcore import checkpoint
from damagelab.gradsuite import check_full_graph, check_losses, check_ops, op_cases

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _conv_ref(x, w, b):
    """Direct 'same' convolution by loops."""
    B, H, W, Cin = x.shape
    k = w.shape[0]
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.zeros((B, H, W, w.shape[3]))
    for i in range(H):
        for j in range(W):
            patch = xp[:, i : i + k, j : j + k, :]
            out[:, i, j, :] = np.einsum("bhwc,hwco->bo", patch, w)
    return out + b


def test_every_op_has_a_passing_gradient_check():
    results = check_ops()
    assert {r.name for r in results} == set(op_cases())
    bad = [(r.name, r.report.max_rel_error) for r in results if not r.passed]
    assert not bad


def test_loss_and_full_graph_gradient_checks():
    for r in check_losses() + check_full_graph():
        assert r.passed, (r.name, r.report.max_rel_error)
        assert r.report.n_checked > 0


def test_conv2d_matches_loop_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=(4,))
    np.testing.assert_allclose(dc.conv2d(x, w, b).data, _conv_ref(x, w, b), atol=1e-12)


def test_upsample_and_pool_values():
    x = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
    up = dc.upsample2x(x).data
    assert up.shape == (1, 4, 4, 2)
    assert np.array_equal(up[0, :2, :2, 1], np.full((2, 2), x[0, 0, 0, 1]))
    np.testing.assert_allclose(dc.grid_avg_pool(up, 2).data, x)


def test_gradient_accumulates_over_reuse():
    a = dc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = dc.sum(dc.add(dc.mul(a, a), a))
    dc.tensor.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_constants_record_no_tape():
    out = dc.mul(dc.Tensor(np.ones(3)), 2.0)
    assert out.op == "leaf" or not out.requires_grad


def test_broadcast_mismatch_raises_shape_error():
    with pytest.raises(dc.ShapeError):
        dc.add(np.ones((3, 4)), np.ones((2, 4)))
    with pytest.raises(dc.ShapeError):
        dc.matmul(np.ones((3, 4)), np.ones((3, 4)))


def test_checked_mode_rejects_non_finite():
    with dc.checked(), np.errstate(divide="ignore"):
        with pytest.raises(dc.NonFiniteError):
            dc.log(dc.Tensor(np.array([0.0, 1.0]), requires_grad=True))
    # outside the block the same op is allowed
    with np.errstate(divide="ignore"):
        assert np.isinf(dc.log(np.array([0.0])).data[0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_sum_of_add_gradient_is_broadcast_count(a):
    """d/db sum(a + b) with b broadcast over rows is the row count."""
    b = dc.Tensor(np.zeros(a.shape[1]), requires_grad=True)
    dc.tensor.backward(dc.sum(dc.add(a, b)))
    np.testing.assert_array_equal(b.grad, np.full(a.shape[1], a.shape[0], dtype=float))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_l2_rows_are_unit(a):
    a = a + 0.1 * np.sign(a + 1e-9) + 0.01  # keep rows away from zero
    n = np.linalg.norm(dc.l2_normalize_rows(a).data, axis=1)
    np.testing.assert_allclose(n[np.linalg.norm(a, axis=1) > 1e-6], 1.0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    rec = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array(1.5, dtype=np.float32), "z": np.zeros((0, 4))}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, rec)
    back = checkpoint.load(path)
    assert list(back) == ["b", "a", "z"]
    for k in rec:
        assert back[k].dtype == np.float32
        np.testing.assert_array_equal(back[k], rec[k])
    assert checkpoint.dumps(back) == path.read_bytes()


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b"NOTACKPT" + b[8:], "bad magic"),
        (lambda b: b[:8] + (2).to_bytes(4, "little") + b[12:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
        (lambda b: b[:10], "truncated"),
    ],
)
def test_checkpoint_corruption_is_reported(mutate, message):
    blob = checkpoint.dumps({"w": np.ones((2, 2))})
    with pytest.raises(checkpoint.CheckpointError, match=message):
        checkpoint.loads(mutate(blob))


def test_missing_checkpoint_names_path(tmp_path):
    with pytest.raises(checkpoint.CheckpointError, match="nope.ckpt"):
        checkpoint.load(tmp_path / "nope.ckpt")
