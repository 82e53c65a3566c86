import numpy as np
import numpy.testing as npt
import pytest

from drmlab.distributions import d_js, js, kl, tv, validate_categorical
from drmlab.numcore import DimensionError


def random_categorical(rng, c):
    """Mix diffuse, peaked, and near-degenerate shapes."""
    alpha = rng.choice([0.1, 1.0, 10.0])
    return rng.dirichlet(np.full(c, alpha))


class TestValidate:
    def test_small_drift_renormalized(self):
        p = np.array([0.5, 0.5]) * (1.0 + 5e-10)
        out = validate_categorical(p)
        npt.assert_allclose(out.sum(), 1.0, atol=1e-15)

    def test_large_drift_rejected(self):
        with pytest.raises(ValueError, match="sums to"):
            validate_categorical([0.6, 0.5])

    def test_negative_entry_rejected(self):
        with pytest.raises(ValueError):
            validate_categorical([1.1, -0.1])

    def test_scalar_or_short_vector_rejected(self):
        with pytest.raises(DimensionError):
            validate_categorical([1.0])


class TestKL:
    def test_identical_is_zero(self):
        assert kl([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_one_hot_vs_uniform(self):
        npt.assert_allclose(kl([1.0, 0.0], [0.5, 0.5]), np.log(2.0), atol=1e-15)

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            c = rng.integers(2, 11)
            p = random_categorical(rng, c)
            q = random_categorical(rng, c)
            pl = p.astype(np.longdouble)
            ql = np.maximum(q.astype(np.longdouble), 1e-12)
            oracle = float(np.sum(np.where(pl > 0, pl * np.log(pl / ql), 0.0)))
            npt.assert_allclose(kl(p, q), oracle, atol=1e-12)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            c = rng.integers(2, 11)
            p = random_categorical(rng, c)
            q = random_categorical(rng, c)
            v = kl(p, q)
            assert v >= 0.0
            if not np.allclose(p, q):
                assert v > 0.0
            assert kl(p, p) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            kl([0.5, 0.5], [0.3, 0.3, 0.4])


class TestJS:
    def test_self_divergence_zero(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = random_categorical(rng, rng.integers(2, 8))
            assert js(p, p) == 0.0

    def test_disjoint_support_hits_ln2(self):
        npt.assert_allclose(js([1.0, 0.0], [0.0, 1.0]), np.log(2.0), atol=1e-12)

    def test_matches_half_kl_formula(self):
        p = np.array([0.8, 0.2])
        q = np.array([0.2, 0.8])
        mid = 0.5 * (p + q)
        oracle = 0.5 * (np.sum(p * np.log(p / mid)) + np.sum(q * np.log(q / mid)))
        npt.assert_allclose(js(p, q), oracle, atol=1e-14)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            c = rng.integers(2, 11)
            p = random_categorical(rng, c)
            q = random_categorical(rng, c)
            a, b = js(p, q), js(q, p)
            assert abs(a - b) < 1e-12
            assert 0.0 <= a <= np.log(2.0) + 1e-12


class TestDjsMetric:
    def test_identity(self):
        assert d_js([0.1, 0.9], [0.1, 0.9]) == 0.0

    def test_disjoint_support(self):
        npt.assert_allclose(d_js([1.0, 0.0], [0.0, 1.0]), np.sqrt(np.log(2.0)), atol=1e-12)

    def test_triangle_inequality_on_random_triples(self):
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            c = rng.integers(2, 6)
            p, q, r = (random_categorical(rng, c) for _ in range(3))
            slack = d_js(p, q) + d_js(q, r) - d_js(p, r)
            assert slack >= -1e-12


class TestTV:
    def test_identity(self):
        assert tv([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_disjoint_support_is_one(self):
        # total variation distance convention: half the L1 difference
        assert tv([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_pinsker_style_bound_against_d_js(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            c = rng.integers(2, 11)
            p = random_categorical(rng, c)
            q = random_categorical(rng, c)
            assert tv(p, q) <= np.sqrt(2.0) * d_js(p, q) + 1e-12
