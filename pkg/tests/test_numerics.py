"""Vector ops, neural blocks and the gradient checker itself."""

import math

import numpy as np
import pytest

from qtrack.autodiff import Tensor, pow_const, sum_
from qtrack.numerics import (
    AttentionParams,
    FfnParams,
    LayerNormParams,
    TransformerLayerParams,
    attention_forward,
    check_gradients,
    cosine_similarity,
    decoder_layer_tensor,
    encoder_layer_tensor,
    ffn_forward,
    softmax,
)


# ---------------------------------------------------------------------------
# cosine similarity


def test_cosine_identical_vectors():
    assert cosine_similarity(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0])) == pytest.approx(1.0)


def test_cosine_orthogonal():
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)


def test_cosine_hand_value():
    # (1,0).(1,1) / (1 * sqrt(2)) = 1/sqrt(2)
    got = cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    assert got == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_zero_norm_warns_and_returns_zero():
    with pytest.warns(RuntimeWarning):
        assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity(np.ones(3), np.ones(4))


def test_cosine_properties_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        u = rng.normal(size=8)
        v = rng.normal(size=8)
        c = cosine_similarity(u, v)
        assert abs(c) <= 1.0 + 1e-12
        assert c == pytest.approx(cosine_similarity(v, u))
        assert cosine_similarity(u, u) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_singleton():
    np.testing.assert_allclose(softmax(np.array([3.7])), [1.0])


def test_softmax_symmetry():
    np.testing.assert_allclose(softmax(np.array([2.2, 2.2])), [0.5, 0.5])


def test_softmax_hand_value():
    np.testing.assert_allclose(softmax(np.array([0.0, math.log(3.0)])), [0.25, 0.75], atol=1e-12)


def test_softmax_empty_errors():
    with pytest.raises(ValueError):
        softmax(np.array([]))


def test_softmax_sum_and_shift_invariance():
    rng = np.random.default_rng(1)
    for _ in range(30):
        row = rng.normal(scale=50.0, size=6)
        y = softmax(row)
        assert abs(y.sum() - 1.0) <= 1e-12
        assert np.all(y > 0)
        np.testing.assert_allclose(softmax(row + 123.456), y, atol=1e-12)


# ---------------------------------------------------------------------------
# feedforward block


def _ffn(w1, b1, w2, b2):
    return FfnParams(w1=Tensor(w1), b1=Tensor(b1), w2=Tensor(w2), b2=Tensor(b2))


def test_ffn_zero_weights_annihilate():
    p = _ffn(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 3)), np.zeros(3))
    np.testing.assert_allclose(ffn_forward(np.array([1.0, -2.0, 5.0]), p), np.zeros(3))


def test_ffn_identity_composition():
    p = _ffn(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
    x = np.array([0.5, 0.0, 2.0])  # nonnegative so the rectifier is transparent
    np.testing.assert_allclose(ffn_forward(x, p), x)


def test_ffn_hand_computation():
    # d_in=2, d_h=2, d_out=1 with small fixed weights
    w1 = np.array([[1.0, -1.0], [0.5, 0.25]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[2.0], [3.0]])
    b2 = np.array([0.5])
    x = np.array([1.0, 2.0])
    # hidden pre-activation: [1*1 + 2*0.5 + 0.1, 1*(-1) + 2*0.25 - 0.2] = [2.1, -0.7]
    # after rectifier: [2.1, 0.0]; output: 2.1*2 + 0*3 + 0.5 = 4.7
    p = _ffn(w1, b1, w2, b2)
    np.testing.assert_allclose(ffn_forward(x, p), [4.7])


def test_ffn_shape_mismatch():
    p = _ffn(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        ffn_forward(np.ones(5), p)


# ---------------------------------------------------------------------------
# attention block


def test_attention_single_key_ignores_query():
    rng = np.random.default_rng(2)
    p = AttentionParams.create(4, 1, rng)
    key = rng.normal(size=(1, 4))
    value = rng.normal(size=(1, 4))
    queries = rng.normal(size=(3, 4))
    out = attention_forward(queries, key, value, p)
    # softmax over one element is 1, so every query sees the projected value
    projected = (value @ p.wv.value + p.bv.value) @ p.wo.value + p.bo.value
    for row in out:
        np.testing.assert_allclose(row, projected[0], atol=1e-12)


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(3)
    p = AttentionParams.create(4, 1, rng)
    # identity value/output projections expose the raw mix
    p.wv.value[...] = np.eye(4)
    p.bv.value[...] = 0.0
    p.wo.value[...] = np.eye(4)
    p.bo.value[...] = 0.0
    keys = np.tile(rng.normal(size=(1, 4)), (2, 1))
    values = rng.normal(size=(2, 4))
    out = attention_forward(rng.normal(size=(1, 4)), keys, values, p)
    np.testing.assert_allclose(out[0], values.mean(axis=0), atol=1e-12)


def test_attention_matches_straightline_reimplementation():
    # independent flat-numpy oracle of the same formula, two heads
    rng = np.random.default_rng(4)
    p = AttentionParams.create(6, 2, rng)
    for t in (p.bq, p.bk, p.bv, p.bo):
        t.value[...] = rng.normal(size=6)
    q = rng.normal(size=(2, 6))
    k = rng.normal(size=(3, 6))
    v = rng.normal(size=(3, 6))

    qp = q @ p.wq.value + p.bq.value
    kp = k @ p.wk.value + p.bk.value
    vp = v @ p.wv.value + p.bv.value
    heads = []
    for i in range(2):
        sl = slice(i * 3, (i + 1) * 3)
        scores = qp[:, sl] @ kp[:, sl].T / math.sqrt(3)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        heads.append(w @ vp[:, sl])
    expected = np.concatenate(heads, axis=1) @ p.wo.value + p.bo.value

    np.testing.assert_allclose(attention_forward(q, k, v, p), expected, atol=1e-12)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(5)
    p = AttentionParams.create(4, 1, rng)
    q = rng.normal(size=(2, 4))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    np.testing.assert_allclose(
        attention_forward(q, k, v, p),
        attention_forward(q, k[perm], v[perm], p),
        atol=1e-12,
    )


def test_attention_zero_keys_error():
    p = AttentionParams.create(4, 1, np.random.default_rng(6))
    with pytest.raises(ValueError):
        attention_forward(np.ones((2, 4)), np.zeros((0, 4)), np.zeros((0, 4)), p)


def test_attention_layer_gradients():
    rng = np.random.default_rng(7)
    p = AttentionParams.create(4, 2, rng)
    q = Tensor(rng.normal(size=(2, 4)))
    k = Tensor(rng.normal(size=(3, 4)))

    def loss():
        from qtrack.numerics import attention_tensor

        out = attention_tensor(q, k, k, p)
        return sum_(out * out)

    assert check_gradients(loss, p.tensors() + [q, k]) < 1e-6


def test_transformer_layer_gradients():
    rng = np.random.default_rng(8)
    enc = TransformerLayerParams.create(4, 1, rng)
    dec = TransformerLayerParams.create(4, 1, rng)
    h = Tensor(rng.normal(size=(3, 4)))
    c = Tensor(rng.normal(size=(2, 4)))

    def loss():
        mem = encoder_layer_tensor(h, enc)
        out = decoder_layer_tensor(c, mem, dec)
        return sum_(out * out)

    assert check_gradients(loss, enc.tensors() + dec.tensors()) < 1e-6


# ---------------------------------------------------------------------------
# parameter counts


def test_parameter_count_formulas():
    rng = np.random.default_rng(9)
    ffn = FfnParams.create(5, 7, 3, rng)
    assert sum(t.value.size for t in ffn.tensors()) == FfnParams.count(5, 7, 3) == 5 * 7 + 7 + 7 * 3 + 3

    attn = AttentionParams.create(8, 2, rng)
    assert sum(t.value.size for t in attn.tensors()) == AttentionParams.count(8) == 4 * 64 + 32

    ln = LayerNormParams.create(8)
    assert sum(t.value.size for t in ln.tensors()) == LayerNormParams.count(8) == 16

    layer = TransformerLayerParams.create(8, 1, rng)
    assert sum(t.value.size for t in layer.tensors()) == TransformerLayerParams.count(8)


# ---------------------------------------------------------------------------
# the gradient checker itself


def test_check_gradients_quadratic_exact():
    rng = np.random.default_rng(10)
    p = Tensor(rng.uniform(0.5, 1.5, size=12))  # entries away from zero

    def loss():
        return sum_(pow_const(p, 2.0))

    assert check_gradients(loss, [p], epsilon=1e-5) < 1e-8


def test_check_gradients_detects_corruption():
    rng = np.random.default_rng(11)
    p = Tensor(rng.uniform(0.5, 1.5, size=6))

    def corrupted_identity(t):
        def bw(g):
            doubled = g.copy()
            doubled.flat[0] *= 2.0  # one gradient entry doubled
            if t.grad is None:
                t.grad = np.zeros_like(t.value)
            t.grad += doubled

        return Tensor(t.value.copy(), (t,), bw)

    def loss():
        return sum_(pow_const(corrupted_identity(p), 2.0))

    assert check_gradients(loss, [p], epsilon=1e-5) > 0.1


def test_check_gradients_rejects_nonfinite_loss():
    p = Tensor(np.array([1.0]))

    def loss():
        return Tensor(np.array(np.inf)) * p

    with pytest.raises(ValueError):
        check_gradients(loss, [p])
