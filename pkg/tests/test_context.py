import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxformer.attention import HeadConfig, make_causal_mask, multi_head_attention, project_qkv
from ctxformer.context import (
    ContextConfig,
    ContextParams,
    ContextStrategy,
    assemble_context,
    build_causal_global_context,
    build_deep_context,
    build_deep_global_context,
    build_global_context,
    context_aware_attention,
    contextualize_qk,
    gate_lambda,
)
from ctxformer.errors import ConfigError, EmptyInputError
from ctxformer.gradcheck import finite_diff_gradcheck
from ctxformer.tensor import Tensor, mean_all


def T(data, rg=False):
    return Tensor(np.array(data, dtype=float), requires_grad=rg)


class TestContextWidths:
    @pytest.mark.parametrize(
        "strategy,layer,expected",
        [
            (ContextStrategy.NONE, 3, 0),
            (ContextStrategy.GLOBAL, 3, 4),
            (ContextStrategy.DEEP, 1, 0),
            (ContextStrategy.DEEP, 3, 8),
            (ContextStrategy.DEEP_GLOBAL, 3, 12),
            (ContextStrategy.DEEP_GLOBAL_PLUS_DEEP, 1, 4),
            (ContextStrategy.DEEP_GLOBAL_PLUS_DEEP, 3, 20),
        ],
    )
    def test_width_table(self, strategy, layer, expected):
        assert strategy.width(layer, 4) == expected

    def test_parse(self):
        assert ContextStrategy.parse("deep_global") is ContextStrategy.DEEP_GLOBAL
        with pytest.raises(ConfigError):
            ContextStrategy.parse("bogus")


class TestGlobalContext:
    def test_constant_rows(self):
        out = build_global_context(T([[3.0, 4.0], [3.0, 4.0]]), [True, True])
        assert out.data.tolist() == [3.0, 4.0]

    def test_hand_mean(self):
        out = build_global_context(T([[1.0, 3.0], [5.0, 7.0]]), [True, True])
        assert out.data.tolist() == [3.0, 5.0]

    def test_padding_masked_out(self):
        out = build_global_context(T([[1.0, 1.0], [9.0, 9.0]]), [True, False])
        assert out.data.tolist() == [1.0, 1.0]

    def test_all_pad_rejected(self):
        with pytest.raises(EmptyInputError):
            build_global_context(T([[1.0, 1.0]]), [False])


class TestCausalGlobalContext:
    def test_prefix_means(self):
        out = build_causal_global_context(T([[2.0], [4.0], [6.0]]))
        assert out.data.tolist() == [[2.0], [3.0], [4.0]]

    def test_first_row_is_input_row(self):
        x = np.random.default_rng(0).normal(size=(3, 2))
        out = build_causal_global_context(T(x))
        assert np.allclose(out.data[0], x[0])

    def test_constant_invariance(self):
        out = build_causal_global_context(T(np.full((3, 2), 5.0)))
        assert np.allclose(out.data, 5.0, atol=1e-12)


class TestDeepContext:
    def test_layer_two_is_first_state(self):
        h1 = T([[1.0, 2.0]])
        out = build_deep_context([h1], layer=2)
        assert out.data.tolist() == h1.data.tolist()

    def test_shape_at_layer_three(self):
        states = [T(np.zeros((5, 4))), T(np.zeros((5, 4)))]
        assert build_deep_context(states, layer=3).shape == (5, 8)

    def test_layer_one_is_empty(self):
        assert build_deep_context([], layer=1) is None

    def test_wrong_length_rejected(self):
        with pytest.raises(ConfigError):
            build_deep_context([T(np.zeros((2, 2)))], layer=3)


class TestDeepGlobalContext:
    def test_single_layer_equals_global(self):
        h = T([[1.0, 3.0], [5.0, 7.0]])
        out = build_deep_global_context([h], [True, True], causal=False)
        assert out.data.tolist() == build_global_context(h, [True, True]).data.tolist()

    def test_width_two_layers(self):
        states = [T(np.zeros((3, 4))), T(np.ones((3, 4)))]
        out = build_deep_global_context(states, [True] * 3, causal=False)
        assert out.shape == (8,)

    def test_constant_layers_concatenate_their_means(self):
        a = T(np.full((2, 3), 2.0))
        b = T(np.full((2, 3), 9.0))
        out = build_deep_global_context([a, b], [True, True], causal=False)
        assert out.data.tolist() == [2.0, 2.0, 2.0, 9.0, 9.0, 9.0]

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            build_deep_global_context([], [True], causal=False)

    def test_causal_variant_is_positionwise(self):
        states = [T(np.arange(6.0).reshape(3, 2))]
        out = build_deep_global_context(states, [True] * 3, causal=True)
        assert out.shape == (3, 2)
        assert np.allclose(out.data[0], states[0].data[0])


class TestAssembleContext:
    def test_global_broadcasts_identical_rows(self):
        h = T([[1.0, 3.0], [5.0, 7.0]])
        out = assemble_context(ContextStrategy.GLOBAL, 1, [h], [True, True], False)
        assert np.allclose(out.data, [[3.0, 5.0], [3.0, 5.0]])

    def test_combined_width_layer_three(self):
        states = [T(np.zeros((2, 4))) for _ in range(3)]
        out = assemble_context(
            ContextStrategy.DEEP_GLOBAL_PLUS_DEEP, 3, states, [True, True], False
        )
        assert out.shape == (2, 20)

    def test_none_is_absent(self):
        assert assemble_context(ContextStrategy.NONE, 1, [T([[1.0]])], [True], False) is None

    def test_combined_order_deep_global_then_deep(self):
        h1 = T(np.full((2, 2), 1.0))
        h2 = T(np.full((2, 2), 5.0))
        out = assemble_context(
            ContextStrategy.DEEP_GLOBAL_PLUS_DEEP, 2, [h1, h2], [True, True], False
        )
        # [c^1, c^2] then H^1
        assert out.data[0].tolist() == [1.0, 1.0, 5.0, 5.0, 1.0, 1.0]


class TestGateLambda:
    def test_zero_parameters_give_half(self):
        lam = gate_lambda(
            T(np.ones((3, 2))),
            T(np.ones((3, 2))),
            T(np.zeros((2, 2))),
            T(np.zeros((2, 1))),
            T(np.zeros((2, 1))),
        )
        assert np.all(lam.data == 0.5)
        assert lam.shape == (3, 1)

    def test_derived_sigmoid_ln3(self):
        # x @ v_h = 2 and (c @ u) @ v_c = ln 3 - 2, so lam = sigma(ln 3) = 0.75
        lam = gate_lambda(
            T([[2.0]]), T([[1.0]]), T([[math.log(3.0) - 2.0]]), T([[1.0]]), T([[1.0]])
        )
        assert lam.data[0, 0] == pytest.approx(0.75, abs=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_lambda_always_in_open_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        lam = gate_lambda(
            T(rng.normal(scale=5.0, size=(4, 3))),
            T(rng.normal(scale=5.0, size=(4, 2))),
            T(rng.normal(scale=5.0, size=(2, 3))),
            T(rng.normal(scale=5.0, size=(3, 1))),
            T(rng.normal(scale=5.0, size=(3, 1))),
        )
        assert np.all(lam.data > 0.0) and np.all(lam.data < 1.0)


def _fixed_cfg(lam, sides="both"):
    return ContextConfig(
        strategy=ContextStrategy.GLOBAL, sides=sides, gating="fixed", fixed_lambda=lam
    )


class TestContextualizeQk:
    def test_fixed_zero_is_identity(self):
        rng = np.random.default_rng(0)
        q, k = T(rng.normal(size=(3, 2))), T(rng.normal(size=(3, 2)))
        c = T(rng.normal(size=(3, 2)))
        params = ContextParams(u_q=T(rng.normal(size=(2, 2))), u_k=T(rng.normal(size=(2, 2))))
        q_hat, k_hat, _ = contextualize_qk(q, k, c, params, _fixed_cfg(0.0))
        assert np.array_equal(q_hat.data, q.data)
        assert np.array_equal(k_hat.data, k.data)

    def test_fixed_one_is_projected_context(self):
        q = T([[2.0]])
        c = T([[4.0]])
        params = ContextParams(u_q=T([[1.0]]), u_k=T([[1.0]]))
        q_hat, _, _ = contextualize_qk(q, q, c, params, _fixed_cfg(1.0))
        assert q_hat.data.tolist() == [[4.0]]

    def test_fixed_half_is_midpoint(self):
        q = T([[2.0]])
        c = T([[4.0]])
        params = ContextParams(u_q=T([[1.0]]), u_k=T([[1.0]]))
        q_hat, _, _ = contextualize_qk(q, q, c, params, _fixed_cfg(0.5))
        assert q_hat.data.tolist() == [[3.0]]

    def test_disabled_side_passes_through(self):
        rng = np.random.default_rng(1)
        q, k = T(rng.normal(size=(2, 2))), T(rng.normal(size=(2, 2)))
        c = T(rng.normal(size=(2, 2)))
        params = ContextParams(u_q=T(rng.normal(size=(2, 2))))
        q_hat, k_hat, (lam_q, lam_k) = contextualize_qk(
            q, k, c, params, _fixed_cfg(1.0, sides="query_only")
        )
        assert k_hat is k
        assert lam_k is None and lam_q is not None

    def test_enabled_side_without_context_rejected(self):
        q = T([[1.0]])
        with pytest.raises(ConfigError):
            contextualize_qk(q, q, None, ContextParams(), _fixed_cfg(0.5))


def _straight_line_global_attention(h, w, u, v, n_heads=1):
    """Independent forward oracle: plain numpy, mean -> gate -> mix -> attention."""

    def softmax(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    q, k, val = h @ w["q"], h @ w["k"], h @ w["v"]
    c = np.tile(h.mean(axis=0), (h.shape[0], 1))
    lam_q = 1.0 / (1.0 + np.exp(-(q @ v["q_h"] + (c @ u["q"]) @ v["q_c"])))
    lam_k = 1.0 / (1.0 + np.exp(-(k @ v["k_h"] + (c @ u["k"]) @ v["k_c"])))
    q_hat = (1.0 - lam_q) * q + lam_q * (c @ u["q"])
    k_hat = (1.0 - lam_k) * k + lam_k * (c @ u["k"])
    d = h.shape[1]
    dh = d // n_heads
    heads = []
    for i in range(n_heads):
        sl = slice(i * dh, (i + 1) * dh)
        weights = softmax(q_hat[:, sl] @ k_hat[:, sl].T / math.sqrt(dh))
        heads.append(weights @ val[:, sl])
    return np.concatenate(heads, axis=1) @ w["o"]


class TestContextAwareAttention:
    def _run(self, cfg, h, seed=1, n_heads=1):
        rng = np.random.default_rng(seed)
        d = h.shape[1]
        w = {nm: rng.normal(size=(d, d)) for nm in ("q", "k", "v", "o")}
        u = {nm: rng.normal(size=(d, d)) for nm in ("q", "k")}
        v = {nm: rng.normal(size=(d, 1)) for nm in ("q_h", "q_c", "k_h", "k_c")}
        params = ContextParams(
            u_q=T(u["q"]), u_k=T(u["k"]),
            v_q_h=T(v["q_h"]), v_q_c=T(v["q_c"]),
            v_k_h=T(v["k_h"]), v_k_c=T(v["k_c"]),
        )
        out, trace = context_aware_attention(
            T(h),
            T(w["q"]), T(w["k"]), T(w["v"]), T(w["o"]),
            HeadConfig(d, n_heads),
            params,
            cfg,
            None,
            [T(h)],
            np.ones(h.shape[0], dtype=bool),
            False,
            1,
        )
        return out, trace, (w, u, v)

    def test_strategy_none_equals_baseline(self):
        rng = np.random.default_rng(4)
        h = rng.normal(size=(3, 4))
        cfg = ContextConfig(strategy=ContextStrategy.NONE)
        out, trace, (w, _, _) = self._run(cfg, h, seed=4, n_heads=2)
        ht = T(h)
        q, k, v = project_qkv(ht, T(w["q"]), T(w["k"]), T(w["v"]))
        baseline = multi_head_attention(q, k, v, HeadConfig(4, 2), T(w["o"]))
        assert np.allclose(out.data, baseline.data, atol=1e-12)
        assert trace.lambda_q is None and trace.lambda_k is None

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        h = rng.normal(size=(4, 4))
        cfg = ContextConfig(strategy=ContextStrategy.GLOBAL)
        _, trace, _ = self._run(cfg, h, seed=6, n_heads=2)
        assert np.allclose(trace.attn.sum(axis=1), 1.0, atol=1e-9)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(3, 4))
        cfg = ContextConfig(strategy=ContextStrategy.GLOBAL)
        out, trace, (w, u, v) = self._run(cfg, h, seed=1, n_heads=1)
        expected = _straight_line_global_attention(h, w, u, v, n_heads=1)
        assert np.allclose(out.data, expected, atol=1e-12)
        assert trace.lambda_q is not None and np.all((trace.lambda_q > 0) & (trace.lambda_q < 1))

    def test_oracle_with_two_heads(self):
        rng = np.random.default_rng(8)
        h = rng.normal(size=(5, 4))
        cfg = ContextConfig(strategy=ContextStrategy.GLOBAL)
        out, _, (w, u, v) = self._run(cfg, h, seed=8, n_heads=2)
        expected = _straight_line_global_attention(h, w, u, v, n_heads=2)
        assert np.allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize(
        "strategy",
        [
            ContextStrategy.GLOBAL,
            ContextStrategy.DEEP,
            ContextStrategy.DEEP_GLOBAL,
            ContextStrategy.DEEP_GLOBAL_PLUS_DEEP,
        ],
    )
    def test_fixed_lambda_zero_reduces_to_baseline(self, strategy):
        rng = np.random.default_rng(10)
        d = 4
        h1, h2 = rng.normal(size=(3, d)), rng.normal(size=(3, d))
        w = {nm: rng.normal(size=(d, d)) for nm in ("q", "k", "v", "o")}
        d_c = strategy.width(2, d)
        params = ContextParams(
            u_q=T(rng.normal(size=(d_c, d))), u_k=T(rng.normal(size=(d_c, d)))
        )
        cfg = ContextConfig(strategy=strategy, gating="fixed", fixed_lambda=0.0)
        out, _ = context_aware_attention(
            T(h2),
            T(w["q"]), T(w["k"]), T(w["v"]), T(w["o"]),
            HeadConfig(d, 2),
            params,
            cfg,
            None,
            [T(h1), T(h2)],
            np.ones(3, dtype=bool),
            False,
            2,
        )
        base_cfg = ContextConfig(strategy=ContextStrategy.NONE)
        base, _ = context_aware_attention(
            T(h2),
            T(w["q"]), T(w["k"]), T(w["v"]), T(w["o"]),
            HeadConfig(d, 2),
            None,
            base_cfg,
            None,
            [T(h1), T(h2)],
            np.ones(3, dtype=bool),
            False,
            2,
        )
        assert np.allclose(out.data, base.data, atol=1e-9)

    def test_causal_prefix_context_respects_causality(self):
        rng = np.random.default_rng(12)
        d = 4
        h = rng.normal(size=(5, d))
        h_future = h.copy()
        h_future[4] += 50.0
        cfg = ContextConfig(strategy=ContextStrategy.DEEP_GLOBAL, apply_to="both")
        outs = []
        for states in (h, h_future):
            w = {nm: rng.normal(size=(d, d)) for nm in ("q", "k", "v", "o")}
            rng = np.random.default_rng(12)  # same weights for both runs
            w = {nm: rng.normal(size=(d, d)) for nm in ("q", "k", "v", "o")}
            params = ContextParams(
                u_q=T(rng.normal(size=(d, d))),
                u_k=T(rng.normal(size=(d, d))),
                v_q_h=T(np.zeros((d, 1))), v_q_c=T(np.zeros((d, 1))),
                v_k_h=T(np.zeros((d, 1))), v_k_c=T(np.zeros((d, 1))),
            )
            out, _ = context_aware_attention(
                T(states),
                T(w["q"]), T(w["k"]), T(w["v"]), T(w["o"]),
                HeadConfig(d, 2),
                params,
                cfg,
                make_causal_mask(5),
                [T(states)],
                np.ones(5, dtype=bool),
                True,
                1,
            )
            outs.append(out.data)
        assert np.allclose(outs[0][:4], outs[1][:4], atol=1e-9)


def test_context_parameter_gradients_pass_gradcheck():
    rng = np.random.default_rng(3)
    d = 3
    h = rng.normal(size=(4, d))
    w = {nm: rng.normal(size=(d, d)) for nm in ("q", "k", "v", "o")}
    cfg = ContextConfig(strategy=ContextStrategy.GLOBAL)
    params = {
        "u_q": Tensor(rng.normal(size=(d, d)), requires_grad=True),
        "u_k": Tensor(rng.normal(size=(d, d)), requires_grad=True),
        "v_q_h": Tensor(rng.normal(size=(d, 1)), requires_grad=True),
        "v_q_c": Tensor(rng.normal(size=(d, 1)), requires_grad=True),
        "v_k_h": Tensor(rng.normal(size=(d, 1)), requires_grad=True),
        "v_k_c": Tensor(rng.normal(size=(d, 1)), requires_grad=True),
    }

    def f(ps):
        ctx = ContextParams(**ps)
        out, _ = context_aware_attention(
            T(h),
            T(w["q"]), T(w["k"]), T(w["v"]), T(w["o"]),
            HeadConfig(d, 1),
            ctx,
            cfg,
            None,
            [T(h)],
            np.ones(4, dtype=bool),
            False,
            1,
        )
        return mean_all(out)

    report = finite_diff_gradcheck(f, params, h=1e-4)
    assert report.max_rel_err < 1e-4, report.per_param
