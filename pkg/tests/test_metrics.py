import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedvit.data import AD, CN
from mixedvit.metrics import (
    ConfusionMatrix,
    DegenerateVarianceError,
    accuracy,
    auc_mannwhitney,
    auc_trapezoid,
    confusion,
    format_mean_std,
    mean_std,
    one_way_anova,
    reg_incomplete_beta,
    roc_points,
    stratified_kfold,
    t_test,
)
from mixedvit.train import Prediction


def preds(pairs):
    return [Prediction(f"S{i}", 0.5, p, t) for i, (p, t) in enumerate(pairs)]


# --- folds ------------------------------------------------------------------


def test_kfold_14_subjects_7_folds():
    ids = [f"C{i}" for i in range(7)] + [f"A{i}" for i in range(7)]
    labels = {sid: CN if sid.startswith("C") else AD for sid in ids}
    folds = stratified_kfold(ids, labels, 7, np.random.default_rng(0))
    assert len(folds) == 7
    for fold in folds:
        assert len(fold) == 2
        assert sorted(labels[s] for s in fold) == [CN, AD]


def test_kfold_partition_law():
    rng = np.random.default_rng(1)
    ids = [f"S{i}" for i in range(53)]
    labels = {sid: int(rng.integers(2)) for sid in ids}
    while min(sum(1 for v in labels.values() if v == c) for c in (0, 1)) < 7:
        labels = {sid: int(rng.integers(2)) for sid in ids}
    folds = stratified_kfold(ids, labels, 7, rng)
    flat = [s for f in folds for s in f]
    assert sorted(flat) == sorted(ids)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for c in (0, 1):
        per_fold = [sum(1 for s in f if labels[s] == c) for f in folds]
        assert max(per_fold) - min(per_fold) <= 1


def test_kfold_k1_degenerate():
    with pytest.raises(ValueError):
        stratified_kfold(["a", "b"], {"a": 0, "b": 1}, 1,
                         np.random.default_rng(0))


def test_kfold_class_smaller_than_k():
    ids = ["a", "b", "c"]
    labels = {"a": 0, "b": 0, "c": 1}
    with pytest.raises(ValueError):
        stratified_kfold(ids, labels, 2, np.random.default_rng(0))


# --- confusion / accuracy ---------------------------------------------------


def test_confusion_counting():
    cm = confusion(preds([(AD, AD), (AD, CN), (CN, CN), (CN, CN)]))
    assert (cm.tp, cm.fp, cm.tn, cm.fn) == (1, 1, 2, 0)
    assert accuracy(cm) == 0.75


def test_confusion_all_correct_and_all_wrong():
    assert accuracy(confusion(preds([(AD, AD), (CN, CN)]))) == 1.0
    assert accuracy(confusion(preds([(AD, CN), (CN, AD)]))) == 0.0


def test_confusion_empty_errors():
    with pytest.raises(ValueError):
        confusion([])


def test_accuracy_complement_identity():
    rng = np.random.default_rng(2)
    for _ in range(30):
        pairs = [(int(rng.integers(2)), int(rng.integers(2)))
                 for _ in range(int(rng.integers(1, 40)))]
        cm = confusion(preds(pairs))
        assert 0.0 <= accuracy(cm) <= 1.0
        assert abs(accuracy(cm) - (1 - (cm.fp + cm.fn) / cm.total)) < 1e-12


# --- ROC / AUC ---------------------------------------------------------------


def test_roc_perfect_separation():
    points = roc_points([0.9, 0.8, 0.3, 0.1], [AD, AD, CN, CN])
    assert auc_trapezoid(points) == 1.0
    assert (points[0].fpr, points[0].tpr) == (0.0, 0.0)
    assert (points[-1].fpr, points[-1].tpr) == (1.0, 1.0)


def test_roc_mann_whitney_example():
    scores = [0.9, 0.6, 0.4, 0.1]
    labels = [AD, CN, AD, CN]
    assert abs(auc_trapezoid(roc_points(scores, labels)) - 0.75) < 1e-12
    assert abs(auc_mannwhitney(scores, labels) - 0.75) < 1e-12


def test_roc_all_equal_chance():
    scores = [0.5] * 6
    labels = [AD, CN, AD, CN, AD, CN]
    assert abs(auc_trapezoid(roc_points(scores, labels)) - 0.5) < 1e-12


def test_roc_single_class_errors():
    with pytest.raises(ValueError):
        roc_points([0.4, 0.6], [AD, AD])
    with pytest.raises(ValueError):
        auc_mannwhitney([0.4, 0.6], [CN, CN])


def test_roc_monotone_sequence():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        labels = np.concatenate([[AD, CN], rng.integers(0, 2, size=n)])
        scores = np.round(rng.random(n + 2), 2)  # rounding forces ties
        points = roc_points(scores, labels)
        for a, b in zip(points[:-1], points[1:]):
            assert a.threshold > b.threshold
            assert b.fpr >= a.fpr and b.tpr >= a.tpr


def test_auc_oracle_equivalence_200_random():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = np.concatenate([[AD, CN], rng.integers(0, 2, size=n)])
        scores = np.round(rng.random(n + 2), 1)
        a = auc_trapezoid(roc_points(scores, labels))
        b = auc_mannwhitney(scores, labels)
        assert abs(a - b) < 1e-9


def test_auc_tie_single_pair():
    assert auc_mannwhitney([0.5, 0.5], [AD, CN]) == 0.5


def test_auc_label_swap_symmetry():
    rng = np.random.default_rng(5)
    scores = rng.random(20)
    labels = np.array([AD, CN] * 10)
    a = auc_mannwhitney(scores, labels)
    b = auc_mannwhitney(scores, 1 - labels)
    assert abs(a + b - 1.0) < 1e-12


# --- mean / std ---------------------------------------------------------------


def test_mean_std_identical_values():
    mean, std = mean_std([98.33] * 7)
    assert format_mean_std(mean, std) == "98.33 ± 0.00"


def test_mean_std_hand_computed():
    mean, std = mean_std([1.0, 2.0, 3.0])
    assert mean == 2.0 and std == 1.0


def test_mean_std_single_value():
    mean, std = mean_std([4.25])
    assert format_mean_std(mean, std) == "4.25 ± 0.00"


def test_mean_std_empty_errors():
    with pytest.raises(ValueError):
        mean_std([])


# --- incomplete beta ----------------------------------------------------------


def test_incbeta_endpoints():
    assert reg_incomplete_beta(0.0, 2.0, 3.0) == 0.0
    assert reg_incomplete_beta(1.0, 2.0, 3.0) == 1.0


def test_incbeta_uniform_cdf():
    assert abs(reg_incomplete_beta(0.5, 1.0, 1.0) - 0.5) < 1e-12


def test_incbeta_symmetry_grid():
    for a in (0.5, 1.0, 2.0, 5.0, 10.0):
        for b in (0.5, 1.0, 2.0, 5.0, 10.0):
            for x in np.linspace(0.01, 0.99, 25):
                lhs = reg_incomplete_beta(x, a, b)
                rhs = 1.0 - reg_incomplete_beta(1.0 - x, b, a)
                assert abs(lhs - rhs) < 1e-10


def test_incbeta_against_mpmath_oracle():
    mp.mp.dps = 30
    rng = np.random.default_rng(6)
    for _ in range(100):
        a = float(rng.uniform(0.3, 20.0))
        b = float(rng.uniform(0.3, 20.0))
        x = float(rng.uniform(0.001, 0.999))
        want = float(mp.betainc(a, b, 0, x, regularized=True))
        assert abs(reg_incomplete_beta(x, a, b) - want) < 1e-10


def test_incbeta_domain_errors():
    with pytest.raises(ValueError):
        reg_incomplete_beta(-0.1, 1.0, 1.0)
    with pytest.raises(ValueError):
        reg_incomplete_beta(0.5, 0.0, 1.0)


# --- t-test / ANOVA -----------------------------------------------------------


def test_t_test_identical_samples():
    t, df, p = t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0 and p == 1.0 and df == 4


def test_t_test_textbook_example():
    t, df, p = t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert abs(t - (-1.0)) < 1e-12
    assert df == 8
    # p frozen from the high-precision incomplete-beta oracle (mpmath)
    assert abs(p - 0.34659350708733424) < 1e-4


def test_t_test_antisymmetry():
    a = [1.0, 2.5, 3.0, 4.2]
    b = [2.0, 3.1, 4.4]
    t1, df1, p1 = t_test(a, b)
    t2, df2, p2 = t_test(b, a)
    assert abs(t1 + t2) < 1e-12 and df1 == df2
    assert abs(p1 - p2) < 1e-12


def test_t_test_degenerate_variance():
    assert t_test([2.0, 2.0], [2.0, 2.0]) == (0.0, 2, 1.0)
    with pytest.raises(DegenerateVarianceError):
        t_test([2.0, 2.0], [3.0, 3.0])


def test_anova_identical_groups():
    f, dfb, dfw, p = one_way_anova([[1, 2, 3], [1, 2, 3], [1, 2, 3]])
    assert f == 0.0 and p == 1.0
    assert dfb == 2 and dfw == 6


def test_anova_equals_t_squared_for_two_groups():
    rng = np.random.default_rng(7)
    for _ in range(25):
        a = rng.normal(size=int(rng.integers(2, 12)))
        b = rng.normal(loc=rng.normal(), size=int(rng.integers(2, 12)))
        t, df, pt = t_test(a, b)
        f, dfb, dfw, pf = one_way_anova([a, b])
        assert abs(f - t * t) < 1e-9
        assert abs(pt - pf) < 1e-9
        assert dfb == 1 and dfw == df


def test_anova_detects_separation():
    groups = [[0.0, 0.01, -0.01, 0.005], [5.0, 5.01, 4.99, 5.005],
              [10.0, 10.01, 9.99, 10.002]]
    f, _, _, p = one_way_anova(groups)
    assert p < 0.05


def test_anova_zero_within_nonzero_between():
    f, _, _, p = one_way_anova([[1.0, 1.0], [2.0, 2.0]])
    assert math.isinf(f) and p == 0.0


def test_anova_validation():
    with pytest.raises(ValueError):
        one_way_anova([[1.0, 2.0]])
    with pytest.raises(ValueError):
        one_way_anova([[1.0], [2.0, 3.0]])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12),
       st.lists(st.floats(-100, 100), min_size=2, max_size=12))
@settings(max_examples=50, deadline=None)
def test_t_test_p_in_unit_interval(a, b):
    try:
        _, _, p = t_test(a, b)
    except DegenerateVarianceError:
        return
    assert 0.0 <= p <= 1.0
