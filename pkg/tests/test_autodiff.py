"""Unit tests for the autodiff engine: op semantics, tape behavior, and
spot gradient checks (the exhaustive suite lives in the acceptance tests)."""

import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from lavseg import autodiff as ad
from lavseg.autodiff import ShapeError, Tape, Tensor
from lavseg.gradcheck import check_gradients


def _rand(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)


# --- tape semantics ----------------------------------------------------------

def test_no_tape_records_nothing():
    a = _rand(np.random.default_rng(0), (2, 2))
    out = ad.relu(a)
    assert out.grad is None and a.grad is None


def test_backward_accumulates_into_leaves():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.scale(a, 3.0))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [[3.0, 3.0]])


def test_disconnected_leaf_gets_zero_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([5.0, 7.0], requires_grad=True)
    with Tape() as tape:
        ad.sum_(b)  # b enters the tape but not the loss below
        loss = ad.sum_(a)
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass


def test_backward_requires_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = ad.scale(a, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_grad_accumulates_across_backwards():
    a = Tensor([2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum_(a)
        tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [2.0])


# --- shape contracts ---------------------------------------------------------

@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
def test_elementwise_shape_mismatch(op):
    with pytest.raises(ShapeError):
        op(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_add_bias_contract():
    x = Tensor(np.zeros((2, 3, 4)))
    with pytest.raises(ShapeError):
        ad.add_bias(x, Tensor(np.zeros(3)))
    out = ad.add_bias(x, Tensor(np.ones(4)))
    assert out.shape == (2, 3, 4)
    np.testing.assert_array_equal(out.data, np.ones((2, 3, 4)))


def test_attention_contracts():
    q = Tensor(np.zeros((3, 8)))
    k = Tensor(np.zeros((5, 8)))
    with pytest.raises(ShapeError):
        ad.attention(q, k, Tensor(np.zeros((4, 8))), 2)  # k/v rows differ
    with pytest.raises(ShapeError):
        ad.attention(q, k, Tensor(np.zeros((5, 8))), 3)  # 8 % 3 != 0


def test_linear_matches_matmul_plus_bias():
    rng = np.random.default_rng(1)
    x = _rand(rng, (3, 4))
    w = _rand(rng, (4, 2))
    b = _rand(rng, (2,))
    fused = ad.linear(x, w, b)
    unfused = ad.add_bias(ad.matmul(x, w), b)
    np.testing.assert_array_equal(fused.data, unfused.data)


def test_attention_matches_per_head_reference():
    rng = np.random.default_rng(2)
    q, k, v = (_rand(rng, (4, 6)), _rand(rng, (5, 6)), _rand(rng, (5, 6)))
    out = ad.attention(q, k, v, 3)
    parts = []
    for h in range(3):
        qh, kh, vh = (t.data[:, 2 * h:2 * h + 2] for t in (q, k, v))
        s = qh @ kh.T / math.sqrt(2)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        parts.append((e / e.sum(axis=-1, keepdims=True)) @ vh)
    np.testing.assert_allclose(out.data, np.concatenate(parts, axis=1),
                               rtol=1e-12, atol=1e-12)


# --- numeric behavior --------------------------------------------------------

def test_sigmoid_extreme_stability():
    x = Tensor([-800.0, 0.0, 800.0])
    y = ad.sigmoid(x).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-12)


def test_softmax_known_values():
    # high-precision reference for softmax([1, 2, 3])
    y = ad.softmax(Tensor([[1.0, 2.0, 3.0]])).data[0]
    ref = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-15)
    assert math.isclose(y.sum(), 1.0, abs_tol=1e-15)


def test_softmax_shift_invariance():
    x = np.array([[1e3, 1e3 + 1.0, 1e3 + 2.0]])
    y = ad.softmax(Tensor(x)).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, ad.softmax(Tensor(x - 1e3)).data, atol=1e-15)


def test_bce_all_zero_logits_is_ln2():
    logits = Tensor(np.zeros((4, 4)), requires_grad=True)
    gt = Tensor((np.arange(16).reshape(4, 4) % 2).astype(np.float64))
    loss = ad.bce_with_logits_mean(logits, gt)
    assert math.isclose(loss.item(), math.log(2.0), rel_tol=0, abs_tol=1e-15)


def test_avg_pool2_oracle():
    img = Tensor(np.arange(16, dtype=np.float64).reshape(4, 4))
    out = ad.avg_pool2(img).data
    ref = np.array([[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_array_equal(out, ref)


def test_bilinear_upsample_constant_preserved():
    out = ad.bilinear_upsample(Tensor(np.full((3, 3), 7.0)), 12, 12).data
    np.testing.assert_allclose(out, 7.0, atol=1e-12)


def test_embedding_repeated_ids_backward():
    table = Tensor(np.ones((5, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.embedding(table, [1, 1, 3]))
    tape.backward(loss)
    expect = np.zeros((5, 2))
    expect[1] = 2.0
    expect[3] = 1.0
    np.testing.assert_array_equal(table.grad, expect)


# --- spot gradient checks ----------------------------------------------------

def test_gradcheck_fused_ops():
    rng = np.random.default_rng(7)
    x = _rand(rng, (3, 4))
    w = _rand(rng, (4, 2))
    b = _rand(rng, (2,))
    errs = check_gradients(lambda: ad.sum_(ad.linear(x, w, b)), [x, w, b])
    assert max(errs.values()) < 1e-6

    q, k, v = (_rand(rng, (3, 4)) for _ in range(3))
    errs = check_gradients(lambda: ad.mean(ad.attention(q, k, v, 2)), [q, k, v])
    assert max(errs.values()) < 1e-6


# --- properties --------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 8), st.integers(0, 10_000))
@example(rows=2, d=2, seed=1425)  # a near-constant row, where eps matters
def test_layer_norm_normalizes(rows, d, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(0.0, 3.0, (rows, d)))
    y = ad.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    # eps regularizes the denominator, so the output variance is exactly
    # var/(var + eps), not 1 (rows with near-constant entries fall short)
    var = x.data.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    y = ad.softmax(Tensor(rng.normal(0.0, 5.0, (rows, cols)))).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y >= 0.0)


def test_attention_packed_matches_per_span():
    rng = np.random.default_rng(11)
    bounds = [(0, 3), (3, 5), (8, 2)]
    q, k, v = (_rand(rng, (10, 6)) for _ in range(3))
    g = rng.uniform(-1, 1, (10, 6))

    with ad.Tape() as tape:
        out = ad.attention_packed(q, k, v, 3, bounds)
        loss = ad.sum_(ad.mul(out, Tensor(g)))
    grads = tape.backward(loss)
    packed_grads = [grads[id(t)] for t in (q, k, v)]

    with ad.Tape() as tape:
        parts = [ad.attention(ad.narrow(q, 0, s, n), ad.narrow(k, 0, s, n),
                              ad.narrow(v, 0, s, n), 3) for s, n in bounds]
        ref = ad.concat(parts, axis=0)
        loss = ad.sum_(ad.mul(ref, Tensor(g)))
    ref_grads = tape.backward(loss)

    np.testing.assert_array_equal(out.data, ref.data)
    for got, want in zip(packed_grads, (ref_grads[id(t)] for t in (q, k, v))):
        np.testing.assert_array_equal(got, want)


def test_attention_packed_rejects_bad_bounds():
    rng = np.random.default_rng(12)
    q, k, v = (_rand(rng, (6, 4)) for _ in range(3))
    with pytest.raises(ad.ShapeError):
        ad.attention_packed(q, k, v, 2, [(0, 3), (3, 2)])  # doesn't tile rows
    with pytest.raises(ad.ShapeError):
        ad.attention_packed(q, k, v, 2, [(3, 3), (0, 3)])  # out of order
