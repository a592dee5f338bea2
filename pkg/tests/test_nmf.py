import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objsep.nmf import NmfOptions, kl_divergence, nmf_fixed_w, nmf_full


def _monotone(trace, slack=1e-10):
    return all(b <= a + slack for a, b in zip(trace, trace[1:]))


class TestKlDivergence:
    def test_identity(self):
        v = np.random.default_rng(0).uniform(0.1, 2, (5, 7))
        assert kl_divergence(v, v) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        assert kl_divergence(np.array([[1.0]]), np.array([[math.e]])) == pytest.approx(
            math.e - 2, abs=1e-12)

    def test_zero_entry_convention(self):
        assert kl_divergence(np.array([[0.0]]), np.array([[0.5]])) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            kl_divergence(np.ones((2, 2)), np.ones((2, 3)))

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        v, a = rng.uniform(0, 1, (4, 6)), rng.uniform(0.1, 1, (4, 6))
        v[0, 0] = 0.0
        ref = sum((vi * math.log(vi / ai) if vi > 0 else 0.0) - vi + ai
                  for vi, ai in zip(v.ravel(), a.ravel()))
        assert kl_divergence(v, a) == pytest.approx(ref, rel=1e-12)


class TestNmfFull:
    def test_zero_target(self):
        res = nmf_full(np.zeros((6, 8)), NmfOptions(m=3, max_iters=50))
        assert res.final_divergence <= 6 * 8 * 1e-12 * 3

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_recovery(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.uniform(0.1, 1, (6, 2)) @ rng.uniform(0.1, 1, (2, 8))
        res = nmf_full(v, NmfOptions(m=2, max_iters=500, rel_tol=0.0, seed=seed))
        assert res.final_divergence < 1e-6
        assert _monotone(res.divergence)

    def test_full_scale_shape(self):
        v = np.random.default_rng(2).uniform(0, 1, (2401, 201))
        res = nmf_full(v, NmfOptions(m=25, max_iters=2))
        assert res.w.shape == (2401, 25)
        assert res.h.shape == (25, 201)

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_and_floored(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.gamma(0.5, 1.0, (30, 40))
        v[rng.random(v.shape) < 0.2] = 0.0
        res = nmf_full(v, NmfOptions(m=4, max_iters=100, rel_tol=0.0, seed=seed))
        assert _monotone(res.divergence)
        assert res.w.min() >= 1e-12 and res.h.min() >= 1e-12

    def test_determinism(self):
        v = np.random.default_rng(3).uniform(0, 1, (20, 15))
        a = nmf_full(v, NmfOptions(m=3, seed=9))
        b = nmf_full(v, NmfOptions(m=3, seed=9))
        assert np.array_equal(a.w, b.w) and np.array_equal(a.h, b.h)

    def test_stops_on_rel_tol(self):
        v = np.random.default_rng(4).uniform(0, 1, (20, 15))
        res = nmf_full(v, NmfOptions(m=3, max_iters=5000, rel_tol=1e-3))
        assert res.iterations < 5000
        prev, cur = res.divergence[-2:]
        assert (prev - cur) / prev < 1e-3

    @pytest.mark.parametrize("bad", [-1.0, np.nan, np.inf])
    def test_rejects_invalid(self, bad):
        v = np.ones((3, 3))
        v[1, 1] = bad
        with pytest.raises(ValueError):
            nmf_full(v)

    def test_options_validation(self):
        with pytest.raises(ValueError):
            NmfOptions(m=0)
        with pytest.raises(ValueError):
            NmfOptions(eps=0.0)


class TestNmfFixedW:
    def test_recovery(self):
        rng = np.random.default_rng(5)
        w = rng.uniform(0, 1, (40, 4))
        h = rng.uniform(0.1, 1, (4, 30))
        res = nmf_fixed_w(w @ h, w, NmfOptions(max_iters=500, rel_tol=0.0))
        assert res.final_divergence < 1e-6
        assert np.linalg.norm(res.h - h) / np.linalg.norm(h) < 0.01
        assert np.array_equal(res.w, np.maximum(w, 1e-12))

    def test_zero_target(self):
        w = np.random.default_rng(6).uniform(0, 1, (10, 3))
        res = nmf_fixed_w(np.zeros((10, 5)), w, NmfOptions(max_iters=20))
        np.testing.assert_array_equal(res.h, 1e-12)

    def test_single_column_tiled(self):
        col = np.random.default_rng(7).uniform(0.1, 1, (12, 1))
        res = nmf_fixed_w(np.tile(col, (1, 9)), col, NmfOptions(max_iters=50))
        np.testing.assert_allclose(res.h, 1.0, rtol=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="bins"):
            nmf_fixed_w(np.ones((10, 4)), np.ones((9, 2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.gamma(0.5, 1.0, (30, 25))
        w = rng.uniform(0, 1, (30, 6))
        res = nmf_fixed_w(v, w, NmfOptions(max_iters=100, rel_tol=0.0))
        assert _monotone(res.divergence)
        assert res.h.min() >= 1e-12

    def test_adaptive_columns_monotone(self):
        rng = np.random.default_rng(8)
        v = rng.gamma(0.5, 1.0, (30, 25))
        w = rng.uniform(0, 1, (30, 6))
        res = nmf_fixed_w(v, w, NmfOptions(max_iters=100, rel_tol=0.0), update_cols=[4, 5])
        assert _monotone(res.divergence)
        np.testing.assert_array_equal(res.w[:, :4], w[:, :4])
        assert not np.array_equal(res.w[:, 4:], w[:, 4:])

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 10_000))
    def test_scale_consistency(self, c, seed):
        rng = np.random.default_rng(seed)
        v = rng.uniform(0, 1, (15, 10))
        w = rng.uniform(0.05, 1, (15, 3))
        opts = NmfOptions(max_iters=50, rel_tol=0.0)
        h1 = nmf_fixed_w(v, w, opts).h
        hc = nmf_fixed_w(c * v, w, opts).h
        np.testing.assert_allclose(hc, c * h1, rtol=1e-6)
