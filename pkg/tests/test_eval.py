"""Prediction, per-class accuracy, harmonic mean, and full evaluation."""
from __future__ import annotations

import numpy as np
import pytest

from fedzsl.dataset import AttributeMatrix, ClassSplit, FeatureDataset
from fedzsl.evaluation import (
    EvalError,
    Metrics,
    evaluate,
    harmonic_mean,
    per_class_top1,
    predict,
)
from fedzsl.model import ATTRIBUTE_BASED, ATTRIBUTE_FREE, ModelParams


def identity_params(n: int) -> ModelParams:
    """Regressor that passes features through as attribute predictions."""
    return ModelParams(
        W_g=np.eye(n), b_g=np.zeros(n), W_h=np.zeros((n, n)), b_h=np.zeros(n)
    )


class TestPredict:
    def test_picks_the_best_prototype(self):
        attrs = AttributeMatrix(values=np.eye(4), groups=((0, 4),))
        params = identity_params(4)
        v = np.array([0.1, 0.9, 0.2, 0.0])
        assert predict(params, v, attrs, (0, 1, 2, 3)) == 1

    def test_ties_break_toward_the_smallest_class_id(self):
        # Two identical prototypes produce exactly equal scores.
        values = np.eye(4)
        values[:, 3] = values[:, 1]
        attrs = AttributeMatrix(values=values, groups=((0, 4),))
        params = identity_params(4)
        v = np.array([0.0, 1.0, 0.0, 0.0])
        assert predict(params, v, attrs, (3, 1)) == 1
        assert predict(params, v, attrs, (3,)) == 3

    def test_candidate_order_does_not_matter(self):
        attrs = AttributeMatrix(values=np.eye(4), groups=((0, 4),))
        params = identity_params(4)
        batch = np.eye(4) * 2.0
        forward = predict(params, batch, attrs, (0, 1, 2, 3))
        backward = predict(params, batch, attrs, (3, 2, 1, 0))
        assert np.array_equal(forward, backward)

    def test_single_vector_returns_int(self):
        attrs = AttributeMatrix(values=np.eye(3), groups=((0, 3),))
        params = identity_params(3)
        out = predict(params, np.array([1.0, 0.0, 0.0]), attrs, (0, 1, 2))
        assert isinstance(out, int)
        batch_out = predict(params, np.ones((2, 3)), attrs, (0, 1, 2))
        assert isinstance(batch_out, np.ndarray) and batch_out.shape == (2,)

    def test_restricting_candidates_changes_the_answer(self):
        attrs = AttributeMatrix(values=np.eye(3), groups=((0, 3),))
        params = identity_params(3)
        v = np.array([0.0, 1.0, 0.5])
        assert predict(params, v, attrs, (0, 1, 2)) == 1
        assert predict(params, v, attrs, (0, 2)) == 2

    def test_validation(self):
        attrs = AttributeMatrix(values=np.eye(3), groups=((0, 3),))
        params = identity_params(3)
        with pytest.raises(EvalError):
            predict(params, np.ones(3), attrs, ())
        with pytest.raises(EvalError):
            predict(params, np.ones(3), attrs, (0, 5))
        free = ModelParams(
            W_g=np.eye(3),
            b_g=np.zeros(3),
            W_h=np.zeros((3, 3)),
            b_h=np.zeros(3),
            mode=ATTRIBUTE_FREE,
            W_c=np.zeros((2, 3)),
            b_c=np.zeros(2),
        )
        with pytest.raises(EvalError):
            predict(free, np.ones(3), attrs, (0, 1))


class TestPerClassTop1:
    def test_macro_averages_over_classes_not_samples(self):
        # 10 samples of class 0 all right, 90 samples of class 1 all wrong:
        # the macro average is 50, not the 10 percent micro rate.
        labels = np.array([0] * 10 + [1] * 90)
        preds = np.array([0] * 10 + [0] * 90)
        assert per_class_top1(preds, labels, (0, 1)) == 50.0

    def test_perfect_and_zero(self):
        labels = np.array([3, 4, 3])
        assert per_class_top1(labels, labels, (3, 4)) == 100.0
        assert per_class_top1(np.array([4, 3, 4]), labels, (3, 4)) == 0.0

    def test_prediction_outside_classes_counts_as_wrong(self):
        labels = np.array([0, 0])
        preds = np.array([9, 0])
        assert per_class_top1(preds, labels, (0,)) == 50.0

    def test_stray_label_is_rejected(self):
        with pytest.raises(EvalError):
            per_class_top1(np.array([0]), np.array([7]), (0, 1))

    def test_class_without_samples_is_rejected(self):
        with pytest.raises(EvalError):
            per_class_top1(np.array([0]), np.array([0]), (0, 1))

    def test_shape_mismatch_is_rejected(self):
        with pytest.raises(EvalError):
            per_class_top1(np.array([0, 1]), np.array([0]), (0, 1))


class TestHarmonicMean:
    def test_worked_example(self):
        assert abs(harmonic_mean(57.5, 58.0) - 57.75) <= 0.005

    def test_known_value(self):
        assert harmonic_mean(40.0, 60.0) == pytest.approx(48.0, rel=1e-12)

    def test_zero_edge_cases(self):
        assert harmonic_mean(0.0, 0.0) == 0.0
        assert harmonic_mean(0.0, 80.0) == 0.0

    def test_symmetry(self):
        assert harmonic_mean(30.0, 70.0) == harmonic_mean(70.0, 30.0)

    def test_between_min_and_arithmetic_mean(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = rng.uniform(0.0, 100.0, size=2)
            h = harmonic_mean(a, b)
            assert min(a, b) - 1e-12 <= h <= 0.5 * (a + b) + 1e-12

    def test_range_validation(self):
        with pytest.raises(EvalError):
            harmonic_mean(-1.0, 50.0)
        with pytest.raises(EvalError):
            harmonic_mean(50.0, 101.0)


class TestEvaluate:
    def build_case(self):
        # 4 classes (2 seen, 2 unseen) with orthogonal prototypes and a
        # pass-through regressor: every prediction is exact.
        split = ClassSplit(seen=(0, 1), unseen=(2, 3))
        attrs = AttributeMatrix(values=np.eye(4), groups=((0, 4),))
        params = identity_params(4)
        test_seen = FeatureDataset(
            features=np.eye(4)[[0, 0, 1]] * 3.0,
            labels=np.array([0, 0, 1]),
            split=split,
        )
        test_unseen = FeatureDataset(
            features=np.eye(4)[[2, 3, 3]] * 3.0,
            labels=np.array([2, 3, 3]),
            split=split,
        )
        return params, test_seen, test_unseen, attrs, split

    def test_perfect_model_scores_100_everywhere(self):
        params, test_seen, test_unseen, attrs, split = self.build_case()
        metrics = evaluate(params, test_seen, test_unseen, attrs, split)
        assert metrics.acc_c == 100.0
        assert metrics.acc_u == 100.0
        assert metrics.acc_s == 100.0
        assert metrics.acc_h == 100.0

    def test_unseen_restriction_versus_generalized(self):
        # A model whose unseen predictions always land on a seen class:
        # restricted accuracy stays perfect, generalized drops to zero.
        params, test_seen, test_unseen, attrs, split = self.build_case()
        biased = ModelParams(
            W_g=params.W_g.copy(),
            b_g=np.array([10.0, 0.0, 0.25, 0.25]),
            W_h=params.W_h.copy(),
            b_h=params.b_h.copy(),
        )
        metrics = evaluate(biased, test_seen, test_unseen, attrs, split)
        assert metrics.acc_c == 100.0
        assert metrics.acc_u == 0.0

    def test_averages_over_classes_present_in_the_test_set(self):
        params, test_seen, test_unseen, attrs, split = self.build_case()
        only_class_zero = FeatureDataset(
            features=np.eye(4)[[0, 0]] * 3.0, labels=np.array([0, 0]), split=split
        )
        metrics = evaluate(params, only_class_zero, test_unseen, attrs, split)
        assert metrics.acc_s == 100.0

    def test_attribute_based_requires_unseen_data(self):
        params, test_seen, _, attrs, split = self.build_case()
        with pytest.raises(EvalError):
            evaluate(params, test_seen, None, attrs, split)

    def test_attribute_free_reports_only_seen_accuracy(self):
        split = ClassSplit(seen=(0, 1), unseen=(2,))
        attrs = AttributeMatrix(values=np.eye(3), groups=((0, 3),))
        params = ModelParams(
            W_g=np.zeros((3, 2)),
            b_g=np.zeros(3),
            W_h=np.zeros((2, 3)),
            b_h=np.zeros(2),
            mode=ATTRIBUTE_FREE,
            W_c=np.eye(2),
            b_c=np.zeros(2),
        )
        test_seen = FeatureDataset(
            features=np.array([[2.0, 0.0], [0.0, 2.0], [2.0, 0.0]]),
            labels=np.array([0, 1, 0]),
            split=split,
        )
        metrics = evaluate(params, test_seen, None, attrs, split)
        assert metrics.acc_s == 100.0
        assert metrics.acc_c is None
        assert metrics.acc_u is None
        assert metrics.acc_h is None

    def test_metrics_range_validation(self):
        with pytest.raises(EvalError):
            Metrics(acc_c=None, acc_u=None, acc_s=120.0, acc_h=None)
        with pytest.raises(EvalError):
            Metrics(acc_c=-5.0, acc_u=0.0, acc_s=0.0, acc_h=0.0)
