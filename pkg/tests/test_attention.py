import math

import numpy as np
import pytest

from ctxformer.attention import (
    AttentionMask,
    HeadConfig,
    make_causal_mask,
    multi_head_attention,
    project_qkv,
    scaled_dot_attention,
)
from ctxformer.errors import ConfigError, EmptyInputError, ShapeError
from ctxformer.tensor import Tensor


def T(data):
    return Tensor(np.array(data, dtype=float))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestProjectQkv:
    def test_identity_projection(self):
        h = T([[1.0, 2.0], [3.0, 4.0]])
        eye = T(np.eye(2))
        q, k, v = project_qkv(h, eye, eye, eye)
        assert np.allclose(q.data, h.data, atol=1e-12)

    def test_zero_weights(self):
        h = T([[1.0, 2.0]])
        zero = T(np.zeros((2, 2)))
        q, k, v = project_qkv(h, zero, zero, zero)
        assert np.all(q.data == 0) and np.all(k.data == 0) and np.all(v.data == 0)

    def test_hand_product(self):
        q, _, _ = project_qkv(
            T([[1.0, 2.0]]), T([[1.0, 0.0], [1.0, 1.0]]), T(np.eye(2)), T(np.eye(2))
        )
        assert q.data.tolist() == [[3.0, 2.0]]


class TestScaledDotAttention:
    def test_single_key(self):
        out, weights = scaled_dot_attention(T([[1.0, 2.0], [3.0, 4.0]]), T([[1.0, 1.0]]), T([[5.0]]))
        assert np.allclose(weights.data, 1.0)
        assert np.allclose(out.data, [[5.0], [5.0]])

    def test_identical_keys_split_evenly(self):
        out, weights = scaled_dot_attention(
            T([[1.0, 2.0]]), T([[3.0, 4.0], [3.0, 4.0]]), T([[1.0], [0.0]])
        )
        assert np.allclose(weights.data, [[0.5, 0.5]], atol=1e-12)
        assert np.allclose(out.data, [[0.5]])

    def test_hand_softmax(self):
        out, weights = scaled_dot_attention(
            T([[1.0, 0.0]]), T([[1.0, 0.0], [0.0, 1.0]]), T([[1.0], [0.0]])
        )
        expected = _softmax(np.array([[1.0 / math.sqrt(2.0), 0.0]]))
        assert np.allclose(weights.data, expected, atol=1e-12)
        assert weights.data[0, 0] == pytest.approx(0.6698, abs=1e-4)
        assert out.data[0, 0] == pytest.approx(0.6698, abs=1e-4)

    def test_masked_out_row_rejected(self):
        mask = AttentionMask(np.array([[False, False]]))
        with pytest.raises(EmptyInputError, match="row 0"):
            scaled_dot_attention(T([[1.0, 0.0]]), T(np.eye(2)), T(np.eye(2)), mask)

    def test_weight_rows_sum_to_one_under_mask(self):
        rng = np.random.default_rng(5)
        q, k, v = (T(rng.normal(size=(4, 3))) for _ in range(3))
        allowed = rng.random((4, 4)) < 0.5
        allowed[:, 0] = True
        _, weights = scaled_dot_attention(q, k, v, AttentionMask(allowed))
        assert np.allclose(weights.data.sum(axis=1), 1.0, atol=1e-9)


class TestMakeCausalMask:
    def test_singleton(self):
        assert make_causal_mask(1).allowed.tolist() == [[True]]

    def test_row_counts(self):
        mask = make_causal_mask(3)
        assert mask.allowed.sum(axis=1).tolist() == [1, 2, 3]

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            make_causal_mask(0)

    def test_first_position_weight_is_one(self):
        rng = np.random.default_rng(1)
        q, k, v = (T(rng.normal(size=(3, 2))) for _ in range(3))
        _, weights = scaled_dot_attention(q, k, v, make_causal_mask(3))
        assert weights.data[0, 0] == pytest.approx(1.0, abs=1e-12)


class TestMultiHeadAttention:
    def test_single_head_reduces_to_scaled_dot(self):
        rng = np.random.default_rng(2)
        q, k, v = (T(rng.normal(size=(4, 3))) for _ in range(3))
        expected, _ = scaled_dot_attention(q, k, v)
        out = multi_head_attention(q, k, v, HeadConfig(3, 1), T(np.eye(3)))
        assert np.allclose(out.data, expected.data, atol=1e-12)

    def test_output_shape(self):
        rng = np.random.default_rng(3)
        q, k, v = (T(rng.normal(size=(5, 4))) for _ in range(3))
        out = multi_head_attention(q, k, v, HeadConfig(4, 2), T(rng.normal(size=(4, 4))))
        assert out.shape == (5, 4)

    def test_matches_per_head_brute_force(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
        w_o = rng.normal(size=(4, 4))
        # independent straight-line two-head evaluation
        heads = []
        for lo, hi in ((0, 2), (2, 4)):
            scores = q[:, lo:hi] @ k[:, lo:hi].T / math.sqrt(2.0)
            heads.append(_softmax(scores) @ v[:, lo:hi])
        expected = np.concatenate(heads, axis=1) @ w_o
        out = multi_head_attention(T(q), T(k), T(v), HeadConfig(4, 2), T(w_o))
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            HeadConfig(5, 2)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            multi_head_attention(
                T(np.zeros((2, 4))),
                T(np.zeros((2, 4))),
                T(np.zeros((2, 2))),
                HeadConfig(4, 2),
                T(np.eye(4)),
            )


class TestInvariants:
    def test_permutation_equivariance_without_mask(self):
        rng = np.random.default_rng(9)
        h = rng.normal(size=(5, 4))
        w_o = rng.normal(size=(4, 4))
        perm = rng.permutation(5)
        cfg = HeadConfig(4, 2)
        out = multi_head_attention(T(h), T(h), T(h), cfg, T(w_o))
        out_perm = multi_head_attention(T(h[perm]), T(h[perm]), T(h[perm]), cfg, T(w_o))
        assert np.allclose(out_perm.data, out.data[perm], atol=1e-9)

    def test_causal_invariance_to_future_rows(self):
        rng = np.random.default_rng(11)
        h = rng.normal(size=(5, 4))
        h2 = h.copy()
        h2[3:] += rng.normal(size=(2, 4)) * 100
        cfg = HeadConfig(4, 2)
        mask = make_causal_mask(5)
        w_o = T(np.eye(4))
        out = multi_head_attention(T(h), T(h), T(h), cfg, w_o, mask)
        out2 = multi_head_attention(T(h2), T(h2), T(h2), cfg, w_o, mask)
        assert np.allclose(out.data[:3], out2.data[:3], atol=1e-12)
