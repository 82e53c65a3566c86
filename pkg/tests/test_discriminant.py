import numpy as np
import numpy.testing as npt
import pytest

from drmlab.discriminant import (
    ClassBatchPrediction,
    cdr_penalty,
    group_by_class,
    init_matrix,
    slide_update,
)
from drmlab.distributions import js
from drmlab.numcore import Var, grad_check, softmax


class TestInit:
    def test_rows_are_one_hot(self):
        m = init_matrix(3, 0.95)
        npt.assert_array_equal(m.rows, np.eye(3))
        assert m.update_count == 0

    def test_beta_recorded(self):
        m = init_matrix(2, 0.95)
        assert m.beta == 0.95

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            init_matrix(1, 0.5)

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.1, 1.5])
    def test_bad_beta_rejected(self, beta):
        with pytest.raises(ValueError):
            init_matrix(2, beta)


class TestSlideUpdate:
    def test_one_step_arithmetic(self):
        m = init_matrix(2, 0.95)
        out = slide_update(m, [ClassBatchPrediction(0, np.array([0.0, 1.0]))])
        npt.assert_allclose(out.rows[0], [0.05, 0.95])
        npt.assert_array_equal(out.rows[1], [0.0, 1.0])
        assert out.update_count == 1
        assert m.update_count == 0  # input untouched

    def test_fixed_point(self):
        m = init_matrix(2, 0.9)
        out = slide_update(m, [ClassBatchPrediction(1, np.array([0.0, 1.0]))])
        npt.assert_array_equal(out.rows[1], [0.0, 1.0])

    def test_geometric_convergence_over_50_updates(self):
        m = init_matrix(2, 0.95)
        const = np.array([0.3, 0.7])
        gap0 = np.abs(m.rows[0] - const).max()
        for _ in range(50):
            m = slide_update(m, [ClassBatchPrediction(0, const)])
        # exact-arithmetic bound (1-beta)^50 * gap0 sits below float64
        # resolution; the 1e-13 floor absorbs rounding in the update
        assert np.abs(m.rows[0] - const).max() <= 0.05**50 * gap0 + 1e-13
        assert m.update_count == 50

    def test_measured_decay_rate_matches_one_minus_beta(self):
        m = init_matrix(2, 0.95)
        const = np.array([0.3, 0.7])
        gaps = [np.abs(m.rows[0] - const).max()]
        for _ in range(8):
            m = slide_update(m, [ClassBatchPrediction(0, const)])
            gaps.append(np.abs(m.rows[0] - const).max())
        ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
        npt.assert_allclose(ratios, 0.05, rtol=1e-4)

    def test_bad_label_rejected(self):
        m = init_matrix(2, 0.5)
        with pytest.raises(ValueError):
            slide_update(m, [ClassBatchPrediction(2, np.array([0.5, 0.5]))])

    def test_duplicate_labels_rejected(self):
        m = init_matrix(2, 0.5)
        preds = [
            ClassBatchPrediction(0, np.array([0.5, 0.5])),
            ClassBatchPrediction(0, np.array([0.4, 0.6])),
        ]
        with pytest.raises(ValueError):
            slide_update(m, preds)

    def test_rows_stay_valid_under_random_updates(self):
        rng = np.random.default_rng(0)
        m = init_matrix(4, 0.7)
        for _ in range(100):
            label = int(rng.integers(0, 4))
            mean = rng.dirichlet(np.ones(4))
            m = slide_update(m, [ClassBatchPrediction(label, mean)])
            assert np.all(m.rows >= 0)
            npt.assert_allclose(m.rows.sum(axis=1), 1.0, atol=1e-9)


class TestCdrPenalty:
    def test_zero_when_predictions_match_rows(self):
        m = init_matrix(2, 0.9)
        m = slide_update(m, [ClassBatchPrediction(0, np.array([0.6, 0.4]))])
        out = cdr_penalty(m, [ClassBatchPrediction(0, m.rows[0].copy())])
        npt.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_disjoint_support_single_class(self):
        m = init_matrix(2, 0.9)  # row 0 is [1, 0]
        out = cdr_penalty(m, [ClassBatchPrediction(0, np.array([0.0, 1.0]))])
        npt.assert_allclose(out.value, np.log(2.0), atol=1e-12)

    def test_matches_js_formula_oracle(self):
        rng = np.random.default_rng(1)
        m = init_matrix(3, 0.8)
        for _ in range(50):
            label = int(rng.integers(0, 3))
            m = slide_update(m, [ClassBatchPrediction(label, rng.dirichlet(np.ones(3)))])
        preds = [ClassBatchPrediction(y, rng.dirichlet(np.ones(3))) for y in range(3)]
        oracle = sum(js(m.rows[p.class_label], p.mean_prediction) for p in preds)
        npt.assert_allclose(cdr_penalty(m, preds).value, oracle, atol=1e-12)

    def test_gradient_flows_into_predictions_only(self):
        rng = np.random.default_rng(2)
        m = init_matrix(3, 0.8)
        m = slide_update(m, [ClassBatchPrediction(y, rng.dirichlet(np.ones(3))) for y in range(3)])
        logits0 = rng.standard_normal(6)

        def f(theta):
            leaf = Var(theta)
            pred_rows = leaf.reshape(2, 3).softmax()
            preds = [
                ClassBatchPrediction(0, pred_rows.take_rows([0]).mean(axis=0)),
                ClassBatchPrediction(2, pred_rows.take_rows([1]).mean(axis=0)),
            ]
            out = cdr_penalty(m, preds)
            out.backward()
            return float(out.value), leaf.grad.copy()

        assert grad_check(f, logits0, h=1e-5) < 1e-4

    def test_empty_preds_rejected(self):
        with pytest.raises(ValueError):
            cdr_penalty(init_matrix(2, 0.5), [])


class TestGroupByClass:
    def test_single_class_is_plain_mean(self):
        preds = softmax(np.random.default_rng(3).standard_normal((5, 2)))
        out = group_by_class(preds, [1, 1, 1, 1, 1])
        assert len(out) == 1
        assert out[0].class_label == 1 and out[0].support == 5
        npt.assert_allclose(out[0].values(), preds.mean(axis=0))

    def test_two_singletons(self):
        preds = np.array([[0.9, 0.1], [0.2, 0.8]])
        out = group_by_class(preds, [0, 1])
        npt.assert_array_equal(out[0].values(), preds[0])
        npt.assert_array_equal(out[1].values(), preds[1])

    def test_matches_accumulation_oracle(self):
        rng = np.random.default_rng(4)
        preds = softmax(rng.standard_normal((40, 4)))
        labels = rng.integers(0, 4, size=40)
        by_class = {}
        for p, y in zip(preds, labels):
            by_class.setdefault(int(y), []).append(p)
        out = group_by_class(preds, labels)
        assert [p.class_label for p in out] == sorted(by_class)
        for p in out:
            npt.assert_allclose(p.values(), np.mean(by_class[p.class_label], axis=0), atol=1e-12)
            assert p.support == len(by_class[p.class_label])

    def test_tape_input_stays_differentiable(self):
        rng = np.random.default_rng(5)
        theta = rng.standard_normal(8)
        labels = np.array([0, 1, 1, 0])

        def f(t):
            leaf = Var(t)
            probs = leaf.reshape(4, 2).softmax()
            groups = group_by_class(probs, labels)
            out = sum((g.mean_prediction * np.array([1.0, -2.0])).sum() for g in groups)
            out.backward()
            return float(out.value), leaf.grad.copy()

        assert grad_check(f, theta, h=1e-5) < 1e-4

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            group_by_class(np.full((3, 2), 0.5), [0, 1])

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            group_by_class(np.zeros((0, 2)), [])


class TestFrozenModelConvergence:
    def test_cdr_vanishes_under_constant_predictions(self):
        # a model emitting one constant distribution per class drives the
        # matrix onto those distributions and the penalty to zero
        rng = np.random.default_rng(6)
        c = 3
        constant = {y: rng.dirichlet(np.ones(c)) for y in range(c)}
        m = init_matrix(c, 0.95)
        for _ in range(500):
            preds = [ClassBatchPrediction(y, constant[y]) for y in range(c)]
            m = slide_update(m, preds)
        final = cdr_penalty(m, [ClassBatchPrediction(y, constant[y]) for y in range(c)])
        assert final.value < 1e-6
