import numpy as np
import numpy.testing as npt
import pytest

from drmlab.numcore import (
    DimensionError,
    NumericError,
    Var,
    cross_entropy,
    grad_check,
    matmul,
    softmax,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(matmul(np.eye(2), a), a)

    def test_row_times_column(self):
        out = matmul(np.array([[1.0, 0.0]]), np.array([[0.0], [5.0]]))
        npt.assert_array_equal(out, np.array([[0.0]]))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        oracle = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    oracle[i, j] += a[i, k] * b[k, j]
        npt.assert_allclose(matmul(a, b), oracle, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.standard_normal((3, 5))
            b = rng.standard_normal((5, 4))
            c = rng.standard_normal((4, 6))
            npt.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-10)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            matmul(np.array([[np.nan, 1.0]]), np.zeros((2, 1)))


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        npt.assert_allclose(softmax([0.0, 0.0, 0.0]), np.full(3, 1.0 / 3.0), atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        assert out[0] > 1.0 - 1e-12 and out[1] < 1e-12

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-20, 20, size=5)
        e = np.exp(x.astype(np.longdouble))
        oracle = (e / e.sum()).astype(np.float64)
        npt.assert_allclose(softmax(x), oracle, atol=1e-12)

    def test_shift_invariance_and_normalization(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = rng.uniform(-1e3, 1e3, size=rng.integers(2, 8))
            s = softmax(x)
            assert np.all(s >= 0)
            assert abs(s.sum() - 1.0) < 1e-12
            npt.assert_allclose(softmax(x + 123.456), s, atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            softmax([np.inf, 0.0])


class TestCrossEntropy:
    def test_perfect_prediction_is_near_zero(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert cross_entropy(probs, [0, 1]) == 0.0

    def test_uniform_two_class(self):
        probs = np.full((4, 2), 0.5)
        npt.assert_allclose(cross_entropy(probs, [0, 1, 0, 1]), np.log(2.0))

    def test_zero_probability_is_clipped(self):
        val = cross_entropy(np.array([[1.0, 0.0]]), [1])
        npt.assert_allclose(val, -np.log(1e-12))


class TestGradCheck:
    def test_quadratic(self):
        def f(theta):
            return float(theta[0] ** 2), np.array([2.0 * theta[0]])

        assert grad_check(f, np.array([3.0])) < 1e-8

    def test_constant_function(self):
        def f(theta):
            return 1.5, np.zeros_like(theta)

        assert grad_check(f, np.ones(4)) == 0.0

    def test_mlp_cross_entropy(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 3))
        y = rng.integers(0, 2, size=6)
        sizes = [(3, 5), (5, 2)]

        def f(theta):
            pos = 0
            h = Var(x)
            params = []
            for n_in, n_out in sizes:
                w = Var(theta[pos : pos + n_in * n_out].reshape(n_in, n_out))
                pos += n_in * n_out
                b = Var(theta[pos : pos + n_out])
                pos += n_out
                params.extend([w, b])
                h = (h @ w + b).tanh()
            loss = -h.log_softmax().pick(y).mean()
            loss.backward()
            grad = np.concatenate([p.grad.ravel() for p in params])
            return float(loss.value), grad

        n_params = sum(n_in * n_out + n_out for n_in, n_out in sizes)
        theta = rng.standard_normal(n_params)
        assert grad_check(f, theta, h=1e-5) < 1e-4

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: (0.0, np.zeros_like(t)), np.ones(2), h=0.1)

    def test_non_finite_loss_raises(self):
        def f(theta):
            if abs(theta[0] - 1.0) > 1e-9:
                return np.inf, np.zeros_like(theta)
            return 0.0, np.zeros_like(theta)

        with pytest.raises(NumericError):
            grad_check(f, np.array([1.0]))


def _tape_cases():
    """Scalar-valued tape expressions exercising every differentiable op."""
    return {
        "add": lambda v: (v + v * 2.0).sum(),
        "sub": lambda v: (v - v * 0.3 + 1.0).square().sum(),
        "mul": lambda v: (v * v).mean(),
        "div": lambda v: (v / (v.square() + 2.0)).sum(),
        "neg": lambda v: (-v).square().sum(),
        "matmul": lambda v: (v.reshape(2, 5) @ v.reshape(5, 2)).sum(),
        "tanh": lambda v: v.tanh().square().sum(),
        "exp": lambda v: (v * 0.3).exp().mean(),
        "log": lambda v: (v.square() + 1.0).log().sum(),
        "softplus": lambda v: v.softplus().mean(),
        "clip_min": lambda v: v.clip_min(0.2).sum(),
        "sum_axis": lambda v: v.reshape(2, 5).sum(axis=0).square().sum(),
        "mean_axis": lambda v: v.reshape(5, 2).mean(axis=0).square().sum(),
        "transpose": lambda v: (v.reshape(2, 5).T @ v.reshape(2, 5)).mean(),
        "getitem": lambda v: v[2:7].square().sum(),
        "take_rows": lambda v: v.reshape(5, 2).take_rows([0, 3, 3]).sum(),
        "pick": lambda v: v.reshape(5, 2).pick([0, 1, 1, 0, 1]).sum(),
        "softmax": lambda v: (v.reshape(2, 5).softmax() * np.arange(10.0).reshape(2, 5)).sum(),
        "log_softmax": lambda v: v.reshape(2, 5).log_softmax().pick([1, 3]).mean(),
    }


class TestTapeGradients:
    @pytest.mark.parametrize("name", sorted(_tape_cases()))
    def test_op_matches_central_differences(self, name):
        case = _tape_cases()[name]
        # 6 random instances per op; the suite totals > 100 checks
        for seed in range(6):
            rng = np.random.default_rng(hash((name, seed)) % 2**32)
            theta = rng.uniform(0.5, 1.5, size=10)

            def f(t):
                leaf = Var(t)
                out = case(leaf)
                out.backward()
                return float(out.value), leaf.grad.copy()

            assert grad_check(f, theta, h=1e-5) < 1e-4, name

    def test_backward_needs_scalar(self):
        v = Var(np.ones(3))
        with pytest.raises(DimensionError):
            (v * 2.0).backward()

    def test_constants_are_stop_gradient(self):
        v = Var(np.ones(3))
        out = (v * np.array([1.0, 2.0, 3.0])).sum()
        out.backward()
        npt.assert_array_equal(v.grad, [1.0, 2.0, 3.0])

    def test_reused_node_accumulates(self):
        v = Var(np.array([2.0]))
        out = v * v + v  # dv = 2v + 1 = 5
        out.backward()
        npt.assert_allclose(v.grad, [5.0])
