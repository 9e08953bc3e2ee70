import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilemoe.core import (ExpertWeights, ForwardCache, MoEConfig, RoutingPlan, dense_gemm,
                          seeded_rng)


def triple_loop(A, B):
    M, K = A.shape
    N = B.shape[1]
    C = [[0.0] * N for _ in range(M)]
    for i in range(M):
        for j in range(N):
            acc = 0.0
            for k in range(K):
                acc += float(A[i, k]) * float(B[k, j])
            C[i][j] = acc
    return np.array(C)


class TestMoEConfig:
    def test_derived_ratios(self):
        cfg = MoEConfig(T=24576, d=1536, n=256, E=128, K=8)
        assert cfg.G == 6
        assert cfg.rho == Fraction(1, 16)
        assert cfg.element_bytes == 2

    @pytest.mark.parametrize("kw", [
        dict(T=0), dict(d=0), dict(n=0), dict(E=0), dict(K=0), dict(K=5), dict(M_tile=0),
        dict(element_bytes=3),
    ])
    def test_rejects_invalid(self, kw):
        base = dict(T=4, d=4, n=2, E=4, K=2, M_tile=4)
        base.update(kw)
        with pytest.raises(ValueError):
            MoEConfig(**base)


class TestSeededRng:
    def test_same_index_same_value(self):
        assert seeded_rng(0, "sr").uniform(0) == seeded_rng(0, "sr").uniform(0)

    def test_seed_separation(self):
        a = seeded_rng(0, "sr").uniforms(range(16))
        b = seeded_rng(1, "sr").uniforms(range(16))
        assert not np.array_equal(a, b)

    def test_stream_separation(self):
        assert seeded_rng(0, "sr").uniform(3) != seeded_rng(0, "nr").uniform(3)

    def test_order_independent_replay(self):
        rng = seeded_rng(0, "sr")
        sequential = {i: rng.uniform(i) for i in range(200)}
        order = list(range(200))
        random.Random(7).shuffle(order)
        shuffled = {i: seeded_rng(0, "sr").uniform(i) for i in order}
        assert shuffled == sequential

    def test_uniform_range(self):
        u = seeded_rng(5, "x").uniforms(range(2000))
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.03

    def test_bulk_generator_replayable(self):
        a = seeded_rng(3, "w").generator(2).standard_normal(5)
        b = seeded_rng(3, "w").generator(2).standard_normal(5)
        c = seeded_rng(3, "w").generator(3).standard_normal(5)
        assert np.array_equal(a, b) and not np.array_equal(a, c)


class TestDenseGemm:
    def test_identity(self):
        B = np.arange(6.0).reshape(3, 2)
        assert np.array_equal(dense_gemm(np.eye(3), B), B)

    def test_scalar(self):
        assert dense_gemm([[3.0]], [[4.0]])[0, 0] == 12.0

    def test_matches_triple_loop(self):
        gen = seeded_rng(0, "gemm").generator(0)
        A, B = gen.standard_normal((5, 4)), gen.standard_normal((4, 3))
        ref = triple_loop(A, B)
        np.testing.assert_allclose(dense_gemm(A, B), ref, rtol=1e-15, atol=0)

    def test_left_to_right_order_bitwise(self):
        gen = seeded_rng(1, "gemm").generator(0)
        A, B = gen.standard_normal((3, 9)), gen.standard_normal((9, 2))
        assert np.array_equal(dense_gemm(A, B), triple_loop(A, B))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dense_gemm(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-100, 100, allow_nan=False), st.integers(0, 2**32 - 1))
    def test_linear_in_scale(self, alpha, seed):
        gen = np.random.default_rng(seed)
        A, B = gen.standard_normal((4, 5)), gen.standard_normal((5, 3))
        lhs = dense_gemm(alpha * A, B)
        rhs = alpha * dense_gemm(A, B)
        scale = max(np.abs(rhs).max(), 1e-300)
        assert np.abs(lhs - rhs).max() <= 1e-12 * scale


class TestRoutingPlan:
    def test_expert_contiguous_order_and_frequencies(self):
        plan = RoutingPlan(3, 2, [2, 0, 1, 0], [1, 1, 0, 0], [0.1, 0.2, 0.3, 0.4],
                           kind="expert_choice")
        assert plan.expert_idx.tolist() == [0, 0, 1, 1]
        assert plan.token_idx.tolist() == [0, 1, 0, 2]
        assert plan.frequencies.tolist() == [2, 2]
        assert [t.tolist() for t in plan.expert_tokens] == [[0, 1], [0, 2]]
        assert plan.assignments[0] == [(0, 0.4), (1, 0.2)]

    def test_token_choice_needs_exactly_k(self):
        with pytest.raises(ValueError):
            RoutingPlan(2, 2, [0, 0, 1], [0, 1, 0], [1, 1, 1], kind="token_choice", K=2)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            RoutingPlan(2, 2, [2], [0], [1.0], kind="expert_choice")
        with pytest.raises(ValueError):
            RoutingPlan(2, 2, [0], [2], [1.0], kind="expert_choice")

    def test_rejects_duplicates_and_nonfinite(self):
        with pytest.raises(ValueError):
            RoutingPlan(2, 2, [0, 0], [1, 1], [1.0, 1.0], kind="expert_choice")
        with pytest.raises(ValueError):
            RoutingPlan(2, 2, [0], [1], [np.nan], kind="expert_choice")

    def test_token_rounded_divisibility(self):
        with pytest.raises(ValueError):
            RoutingPlan(8, 1, [0, 1, 2], [0, 0, 0], [1, 1, 1], kind="token_rounded", K=1, m_tile=2)
        RoutingPlan(8, 1, [0, 1], [0, 0], [1, 1], kind="token_rounded", K=1, m_tile=2)

    def test_immutable(self):
        plan = RoutingPlan(2, 2, [0], [1], [1.0], kind="expert_choice")
        with pytest.raises(ValueError):
            plan.gates[0] = 2.0


def test_expert_weights_shapes():
    cfg = MoEConfig(T=4, d=6, n=3, E=5, K=2)
    w = ExpertWeights.random(cfg, 0)
    assert w.Wr.shape == (6, 5) and w.W1.shape == (5, 6, 6) and w.W2.shape == (5, 3, 6)
    w.check(cfg)
    with pytest.raises(ValueError):
        ExpertWeights(w.Wr, w.W1[:4], w.W2)
    with pytest.raises(ValueError):
        ExpertWeights(w.Wr, w.W1, w.W2 * np.inf)


def test_forward_cache_bytes():
    plan = RoutingPlan(3, 2, [0, 1, 2], [0, 1, 1], [1, 1, 1], kind="expert_choice")
    cache = ForwardCache(np.zeros((3, 4)), np.zeros((3, 6)), plan)
    T, d, n = 3, 4, 3
    assert cache.nbytes() == 2 * T * d + 4 * plan.frequencies.sum() * n
    with pytest.raises(ValueError):
        ForwardCache(np.zeros((3, 4)), np.zeros((2, 6)), plan)
