import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilemoe.core import MoEConfig
from tilemoe.cost_models import (MINIMAL_POLICY, POLICY_WITH_Y, PRESETS, activation_bytes,
                                 arithmetic_intensity, expected_wasted_flops, io_bytes_forward,
                                 model_flops, sweep)

SEVEN_B = MoEConfig(T=24576, d=1536, n=256, E=128, K=8)


class TestModelFlops:
    def test_unit(self):
        assert model_flops(MoEConfig(T=1, d=1, n=1, E=1, K=1)) == 18

    def test_7b(self):
        assert model_flops(SEVEN_B) == 1_391_569_403_904

    def test_iso_flops(self):
        assert model_flops(SEVEN_B.replace(n=128, K=16)) == model_flops(SEVEN_B)

    def test_forward_backward_split(self):
        fwd = model_flops(SEVEN_B, forward_only=True)
        assert 3 * fwd == model_flops(SEVEN_B)
        assert (model_flops(SEVEN_B) - fwd) == 2 * fwd


class TestIOBytes:
    def test_weight_traffic_only(self):
        cfg = MoEConfig(T=4, d=8, n=2, E=3, K=1)
        assert io_bytes_forward(cfg, uniform=False, frequencies=[0, 0, 0]) == 3 * 6 * 2 * 8

    def test_7b_uniform(self):
        assert io_bytes_forward(SEVEN_B) == 1_711_276_032
        assert io_bytes_forward(SEVEN_B) / SEVEN_B.E == 13_369_344

    def test_h_writes_toggle(self):
        extra = io_bytes_forward(SEVEN_B, include_H_writes=True) - io_bytes_forward(SEVEN_B)
        assert extra == 4 * SEVEN_B.T * SEVEN_B.K * SEVEN_B.n

    def test_grows_with_granularity(self):
        io = [io_bytes_forward(c) for c in PRESETS["7b-io"]]
        G = [float(c.G) for c in PRESETS["7b-io"]]
        assert all(a > b for a, b in zip(io, io[1:]))
        # at iso-FLOPs the weight term is constant and the activation term is linear in G
        slopes = np.diff(io) / np.diff(G)
        np.testing.assert_allclose(slopes, slopes[0], rtol=1e-12)

    def test_nonuniform_needs_frequencies(self):
        with pytest.raises(ValueError):
            io_bytes_forward(SEVEN_B, uniform=False)


class TestArithmeticIntensity:
    def test_7b(self):
        assert arithmetic_intensity(SEVEN_B) == pytest.approx(271.06, abs=0.01)
        assert arithmetic_intensity(SEVEN_B) == pytest.approx(3 * 1536 / 17, rel=1e-14)

    def test_equals_flops_over_bytes(self):
        for cfg in PRESETS["7b-io"] + PRESETS["fig8"]:
            ratio = model_flops(cfg, forward_only=True) / io_bytes_forward(cfg)
            assert arithmetic_intensity(cfg) == pytest.approx(ratio, rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(64, 8192), st.integers(1, 64), st.integers(1, 1 << 16),
           st.integers(1, 64), st.integers(1, 64))
    def test_monotonicity(self, d, n, T, K, E):
        E = max(E, K)
        cfg = MoEConfig(T=T, d=d, n=n, E=E, K=K)
        # larger G (smaller n) lowers intensity; larger rho (smaller E or larger K) raises it
        if n > 1:
            assert arithmetic_intensity(cfg.replace(n=n - 1)) < arithmetic_intensity(cfg)
        assert arithmetic_intensity(cfg.replace(E=2 * E)) < arithmetic_intensity(cfg)

    def test_vanishes_with_granularity(self):
        vals = [arithmetic_intensity(SEVEN_B.replace(n=n)) for n in (256, 16, 1)]
        assert vals[0] > vals[1] > vals[2] > 0

    def test_nonuniform_rejected(self):
        with pytest.raises(ValueError):
            arithmetic_intensity(SEVEN_B, uniform=False)


class TestActivationBytes:
    def test_7b_minimal(self):
        assert activation_bytes(SEVEN_B) == 276_824_064 == 264 * 2**20

    def test_granularity_invariance(self):
        rows = PRESETS["7b-granularity"]
        assert len({activation_bytes(c) for c in rows}) == 1
        with_y = [activation_bytes(c, POLICY_WITH_Y) for c in rows]
        for c, v in zip(rows, with_y):
            assert v == activation_bytes(c) + 2 * c.T * c.K * c.d

    def test_policies(self):
        cfg = MoEConfig(T=3, d=5, n=2, E=4, K=2)
        base = activation_bytes(cfg, MINIMAL_POLICY)
        assert base == 2 * (3 * 5 + 2 * 3 * 2 * 2)
        for extra in ("Y", "gathered_X", "gathered_dO"):
            assert activation_bytes(cfg, MINIMAL_POLICY | {extra}) == base + 2 * 3 * 2 * 5
        with pytest.raises(ValueError):
            activation_bytes(cfg, set())
        with pytest.raises(ValueError):
            activation_bytes(cfg, {"Z"})

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4096), st.integers(1, 256), st.integers(1, 10), st.integers(1, 8))
    def test_halve_n_double_k(self, T, half_n, logE, K):
        E = 2 ** logE * 2 * K
        cfg = MoEConfig(T=T, d=64, n=2 * half_n, E=E, K=K)
        assert activation_bytes(cfg) == activation_bytes(cfg.replace(n=half_n, K=2 * K))


class TestSweep:
    def test_single_row(self):
        (r,) = sweep([SEVEN_B], trials=5)
        assert r.flops_model == model_flops(SEVEN_B)
        assert r.activation_bytes == activation_bytes(SEVEN_B)
        assert r.arithmetic_intensity == arithmetic_intensity(SEVEN_B)

    def test_io_increasing_as_n_shrinks(self):
        rows = sweep(PRESETS["7b-io"], trials=2)
        ns = [r.cfg.n for r in rows]
        io = [r.io_bytes_forward for r in rows]
        order = np.argsort(ns)[::-1]
        assert all(io[a] < io[b] for a, b in zip(order, order[1:]))

    def test_fig8_waste_increasing(self):
        rows = sweep(PRESETS["fig8"], trials=20)
        waste = [r.wasted_flops for r in rows]
        assert all(a < b for a, b in zip(waste, waste[1:]))

    def test_parallel_rows_identical(self):
        a = sweep(PRESETS["fig8"], trials=5, workers=1)
        b = sweep(PRESETS["fig8"], trials=5, workers=4)
        assert a == b

    def test_expected_waste_deterministic(self):
        cfg = PRESETS["fig8"][0]
        assert expected_wasted_flops(cfg, 3, seed=1) == expected_wasted_flops(cfg, 3, seed=1)
