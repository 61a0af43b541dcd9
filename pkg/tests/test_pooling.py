"""Pooling strategies against brute-force loop oracles."""

import math

import numpy as np
import pytest

from poolbench import numerics as nx
from poolbench import pooling as pl
from poolbench.encoder import LayerStates
from poolbench.numerics import ShapeError, Tensor


def make_states(rng, layers=3, b=2, t=4, h=3):
    return LayerStates([Tensor(rng.normal(size=(b, t, h))) for _ in range(layers)])


def pad(states, extra, rng):
    out = []
    for s in states:
        b, _, h = s.shape
        out.append(Tensor(np.concatenate([s.data, rng.normal(size=(b, extra, h)) * 50], axis=1)))
    return LayerStates(out)


MASK = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], float)


# -- independent oracles: explicit loops over tokens, heads and channels -------


def oracle_masked_mean(h, mask):
    b, t, d = h.shape
    out = np.zeros((b, d))
    for i in range(b):
        idx = [j for j in range(t) if mask[i, j] > 0]
        out[i] = sum(h[i, j] for j in idx) / len(idx)
    return out


def oracle_combine(states, w):
    e = [math.exp(x - max(w)) for x in w]
    alpha = [x / sum(e) for x in e]
    return sum(a * s for a, s in zip(alpha, states))


def oracle_attention(h, mask, q, p):
    b, t, d = h.shape
    out = np.zeros((b, d))
    for i in range(b):
        contexts = []
        for qj in q:
            valid = [j for j in range(t) if mask[i, j] > 0]
            scores = [float(qj @ h[i, j]) / math.sqrt(d) for j in valid]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            a = [x / sum(e) for x in e]
            contexts.append(sum(aj * h[i, j] for aj, j in zip(a, valid)))
        out[i] = np.concatenate(contexts) @ p
    return out


def oracle_gated(pooled, g, bias):
    b, d = pooled[0].shape
    out = np.zeros((b, d))
    for i in range(b):
        z = np.concatenate([x[i] for x in pooled])
        gates = [1 / (1 + math.exp(-(float(z @ g[:, c]) + bias[c]))) for c in range(len(z))]
        for k, x in enumerate(pooled):
            out[i] += np.array(gates[k * d : (k + 1) * d]) * x[i]
    return out


def oracle_pool(cfg, states, mask):
    raw = [s.data for s in states]
    if cfg.kind == "mean":
        return oracle_masked_mean(raw[-1], mask)
    p = {k: v.data for k, v in cfg.parameters.items()}
    comb = oracle_combine(raw, list(p["layer_weights"]))
    if cfg.kind == "wlp_mean":
        return oracle_masked_mean(comb, mask)
    att = oracle_attention(comb, mask, p["queries"], p["projection"])
    if cfg.kind == "wlp_attention":
        return att
    return oracle_gated([oracle_masked_mean(comb, mask), att], p["gate.weight"], p["gate.bias"])


def random_config(kind, rng, layers=3, h=3, heads=2):
    cfg = pl.init_pooling(kind, layers, h, attention_heads=heads, seed=0)
    for t in cfg.parameters.values():
        t.data[...] = rng.uniform(-1, 1, size=t.shape)
    return cfg


class TestMeanPool:
    def test_single_token_is_identity(self):
        states = make_states(np.random.default_rng(0), t=1)
        np.testing.assert_array_equal(pl.mean_pool(states, np.ones((2, 1))).data, states.final.data[:, 0])

    def test_two_token_average(self):
        h = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
        np.testing.assert_array_equal(pl.mean_pool(LayerStates([h]), [[1, 1]]).data, [[0.5, 0.5]])

    def test_uses_final_layer_only(self):
        rng = np.random.default_rng(1)
        states = make_states(rng)
        np.testing.assert_allclose(pl.mean_pool(states, MASK).data, oracle_masked_mean(states[2].data, MASK), rtol=1e-14)


class TestWeightedLayerCombine:
    def test_uniform_weights_give_layer_mean(self):
        states = make_states(np.random.default_rng(2))
        out = pl.weighted_layer_combine(states, np.zeros(3)).data
        np.testing.assert_allclose(out, sum(s.data for s in states) / 3, atol=1e-12)

    def test_saturated_weights_pick_one_layer(self):
        states = make_states(np.random.default_rng(3))
        out = pl.weighted_layer_combine(states, [1e6, -1e6, -1e6]).data
        np.testing.assert_allclose(out, states[0].data, atol=1e-9, rtol=0)

    def test_random_weights_match_direct_sum(self):
        rng = np.random.default_rng(4)
        states = make_states(rng, layers=2)
        w = rng.normal(size=2)
        out = pl.weighted_layer_combine(states, w).data
        np.testing.assert_allclose(out, oracle_combine([s.data for s in states], list(w)), atol=1e-12, rtol=0)

    def test_convex_hull(self):
        rng = np.random.default_rng(5)
        states = make_states(rng, layers=4)
        out = pl.weighted_layer_combine(states, rng.normal(size=4) * 3).data
        stacked = np.stack([s.data for s in states])
        assert np.all(out >= stacked.min(axis=0) - 1e-12) and np.all(out <= stacked.max(axis=0) + 1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            pl.weighted_layer_combine(make_states(np.random.default_rng(0)), np.zeros(2))


class TestAttentionPool:
    def test_single_token(self):
        rng = np.random.default_rng(6)
        h, q, p = rng.normal(size=(2, 1, 3)), rng.normal(size=(2, 3)), rng.normal(size=(6, 3))
        expected = np.concatenate([h[:, 0], h[:, 0]], axis=1) @ p
        np.testing.assert_allclose(pl.attention_pool(Tensor(h), np.ones((2, 1)), q, p).data, expected, rtol=1e-13)

    def test_identical_tokens_match_single_token(self):
        rng = np.random.default_rng(7)
        h1, q, p = rng.normal(size=(1, 1, 3)), rng.normal(size=(2, 3)), rng.normal(size=(6, 3))
        h5 = np.repeat(h1, 5, axis=1)
        one = pl.attention_pool(Tensor(h1), np.ones((1, 1)), q, p).data
        five = pl.attention_pool(Tensor(h5), np.ones((1, 5)), q, p).data
        np.testing.assert_allclose(five, one, atol=1e-13)

    def test_random_instance_matches_loops(self):
        rng = np.random.default_rng(8)
        h, q, p = rng.normal(size=(1, 3, 4)), rng.normal(size=(2, 4)), rng.normal(size=(8, 4))
        mask = np.ones((1, 3))
        out = pl.attention_pool(Tensor(h), mask, q, p).data
        np.testing.assert_allclose(out, oracle_attention(h, mask, q, p), atol=1e-10, rtol=0)

    def test_all_masked_row_rejected(self):
        with pytest.raises(ValueError):
            pl.attention_pool(Tensor(np.ones((1, 2, 3))), np.zeros((1, 2)), np.ones((1, 3)), np.ones((3, 3)))

    def test_projection_shape_checked(self):
        with pytest.raises(ShapeError):
            pl.attention_pool(Tensor(np.ones((1, 2, 3))), np.ones((1, 2)), np.ones((2, 3)), np.ones((3, 3)))


class TestGatedFusion:
    def test_zero_gates_halve_the_sum(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        out = pl.gated_fusion([Tensor(a), Tensor(b)], np.zeros((6, 6)), np.zeros(6)).data
        np.testing.assert_allclose(out, 0.5 * (a + b), rtol=1e-15)

    def test_saturated_bias_selects_first_input(self):
        rng = np.random.default_rng(10)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        bias = np.array([1e3] * 3 + [-1e3] * 3)
        out = pl.gated_fusion([Tensor(a), Tensor(b)], np.zeros((6, 6)), bias).data
        np.testing.assert_allclose(out, a, atol=1e-12)

    def test_random_instance_matches_loops(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        g, bias = rng.normal(size=(4, 4)), rng.normal(size=4)
        out = pl.gated_fusion([Tensor(a), Tensor(b)], g, bias).data
        np.testing.assert_allclose(out, oracle_gated([a, b], g, bias), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pl.gated_fusion([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], np.zeros((7, 7)), np.zeros(7))


class TestPipelines:
    def test_mean_dispatch_is_mean_pool(self):
        states = make_states(np.random.default_rng(12))
        cfg = pl.init_pooling("mean", 3, 3)
        assert np.array_equal(pl.pool(cfg, states, MASK).data, pl.mean_pool(states, MASK).data)

    def test_uniform_wlp_mean_is_mean_of_layer_means(self):
        states = make_states(np.random.default_rng(13))
        cfg = pl.init_pooling("wlp_mean", 3, 3)
        per_layer = [oracle_masked_mean(s.data, MASK) for s in states]
        np.testing.assert_allclose(pl.pool(cfg, states, MASK).data, sum(per_layer) / 3, atol=1e-12)

    @pytest.mark.parametrize("kind", pl.KINDS)
    def test_matches_composed_oracle(self, kind):
        rng = np.random.default_rng(14)
        states = make_states(rng)
        cfg = random_config(kind, rng)
        np.testing.assert_allclose(pl.pool(cfg, states, MASK).data, oracle_pool(cfg, states, MASK), atol=1e-10, rtol=0)

    @pytest.mark.parametrize("kind", pl.KINDS)
    def test_padding_invariance(self, kind):
        rng = np.random.default_rng(15)
        states = make_states(rng)
        cfg = random_config(kind, rng)
        base = pl.pool(cfg, states, MASK).data
        padded = pl.pool(cfg, pad(states, 3, rng), np.concatenate([MASK, np.zeros((2, 3))], axis=1)).data
        assert np.max(np.abs(padded - base)) < 1e-10

    @pytest.mark.parametrize("kind", pl.KINDS)
    def test_gradient(self, kind):
        rng = np.random.default_rng(16)
        states = LayerStates([Tensor(rng.uniform(-2, 2, (2, 4, 3)), requires_grad=True) for _ in range(3)])
        cfg = random_config(kind, rng)
        w = rng.uniform(-1, 1, (2, 3))
        params = {**cfg.parameters, **{f"s{i}": s for i, s in enumerate(states)}}
        report = nx.grad_check(lambda: (pl.pool(cfg, states, MASK) * w).sum(), params)
        assert report.max_rel_error < 1e-4


class TestParameters:
    def test_mean_allocates_nothing(self):
        assert pl.init_pooling("mean", 5, 64).parameters == {}

    @pytest.mark.parametrize("kind", pl.KINDS)
    def test_exact_allocations(self, kind):
        expected = {
            "mean": set(),
            "wlp_mean": {"layer_weights"},
            "wlp_attention": {"layer_weights", "queries", "projection"},
            "wlp_attention_gated": {"layer_weights", "queries", "projection", "gate.weight", "gate.bias"},
        }[kind]
        assert set(pl.init_pooling(kind, 5, 8).parameters) == expected

    def test_default_counts(self):
        # L+1 = 5 states, H = 64, 8 queries, gates over 2 candidates (2H = 128)
        counts = [pl.parameter_count(k, 5, 64, 8) for k in pl.KINDS]
        assert counts == [0, 5, 5 + 8 * 64 + 8 * 64 * 64, 5 + 8 * 64 + 8 * 64 * 64 + 128 * 128 + 128]

    @pytest.mark.parametrize("layers,hidden,heads", [(2, 1, 1), (3, 4, 1), (25, 16, 8), (5, 64, 3)])
    def test_counts_strictly_increase(self, layers, hidden, heads):
        counts = [pl.parameter_count(k, layers, hidden, heads) for k in pl.KINDS]
        assert all(a < b for a, b in zip(counts, counts[1:]))

    def test_neutral_initialisation(self):
        cfg = pl.init_pooling("wlp_attention_gated", 5, 64, 8, seed=0)
        assert np.all(cfg.parameters["layer_weights"].data == 0)
        assert np.all(cfg.parameters["gate.weight"].data == 0)
        assert abs(cfg.parameters["projection"].data.std() - 0.02) < 0.001
