from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridfl.data import LabeledDataset
from hybridfl.errors import BatchSizeError, DimensionMismatchError, EmptyDatasetError
from hybridfl.model import (
    Objective,
    accuracy,
    finite_diff_check,
    full_gradient,
    gradient,
    init_params,
    loss,
    predict,
)

from conftest import tiny_dataset


def _data(rng, n=12, d=3, C=3):
    return LabeledDataset(rng.standard_normal((n, d)), rng.integers(0, C, n))


def test_dims():
    assert Objective("logistic-regression", 20, 10).dim == 210
    assert Objective("mlp-1hidden", 4, 3, hidden_width=5).dim == 5 * 4 + 3 * 5 + 5 + 3
    assert Objective("least-squares", 7).dim == 7


@pytest.mark.parametrize("kw", [
    dict(kind="svm", input_dim=2),
    dict(kind="logistic-regression", input_dim=0),
    dict(kind="logistic-regression", input_dim=2, num_classes=1),
    dict(kind="mlp-1hidden", input_dim=2, num_classes=2, hidden_width=0),
    dict(kind="least-squares", input_dim=2, l2_reg=-1.0),
])
def test_objective_validation(kw):
    with pytest.raises(ValueError):
        Objective(**kw)


def test_logistic_at_zero_matches_hand_computation():
    # softmax of zero logits is uniform: loss = log C, dW = (1/C - onehot)^T A / n
    data = tiny_dataset()
    obj = Objective("logistic-regression", 2, 2)
    x = np.zeros(obj.dim)
    assert loss(obj, x, data) == pytest.approx(math.log(2), abs=1e-15)
    A, y = data.features, data.labels
    P = np.full((4, 2), 0.5)
    P[np.arange(4), y] -= 1.0
    expected = np.concatenate([(P.T @ A / 4).ravel(), P.mean(axis=0)])
    np.testing.assert_allclose(full_gradient(obj, x, data), expected, atol=1e-15)


def test_least_squares_oracle():
    data = tiny_dataset()
    obj = Objective("least-squares", 2, l2_reg=0.3)
    w = np.array([0.5, -0.25])
    r = data.features @ w - data.labels
    assert loss(obj, w, data) == pytest.approx(0.5 * np.mean(r ** 2) + 0.15 * (w @ w), rel=1e-14)
    np.testing.assert_allclose(full_gradient(obj, w, data), data.features.T @ r / 4 + 0.3 * w, rtol=1e-14)


def test_cross_entropy_is_stable_for_huge_logits():
    data = tiny_dataset()
    obj = Objective("logistic-regression", 2, 2)
    x = np.array([1e4, 0.0, -1e4, 0.0, 0.0, 0.0])
    assert math.isfinite(loss(obj, x, data))
    assert np.all(np.isfinite(full_gradient(obj, x, data)))


@pytest.mark.parametrize("kind", ["logistic-regression", "mlp-1hidden", "least-squares"])
def test_finite_difference(kind):
    rng = np.random.default_rng(3)
    obj = Objective(kind, 3, 3, hidden_width=4 if kind == "mlp-1hidden" else 0, l2_reg=0.01)
    data = _data(rng)
    for _ in range(5):
        assert finite_diff_check(obj, rng.standard_normal(obj.dim) * 0.5, data) <= 1e-5


def test_finite_difference_flags_wrong_gradient(monkeypatch):
    import hybridfl.model as m

    rng = np.random.default_rng(0)
    obj = Objective("least-squares", 3)
    data = _data(rng)
    monkeypatch.setattr(m, "full_gradient", lambda o, x, d: 1.01 * (d.features.T @ (d.features @ x - d.labels)) / d.n)
    assert m.finite_diff_check(obj, rng.standard_normal(3), data) > 1e-3


def test_minibatch_enumeration_is_unbiased():
    # averaging over all C(4,2) minibatches recovers the full gradient
    data = tiny_dataset()
    obj = Objective("logistic-regression", 2, 2)
    x = np.array([0.3, -0.2, 0.1, 0.4, 0.0, -0.1])
    mean = np.zeros(obj.dim)
    subsets = list(itertools.combinations(range(4), 2))
    for s in subsets:
        mean += full_gradient(obj, x, data.subset(list(s)))
    np.testing.assert_allclose(mean / len(subsets), full_gradient(obj, x, data), atol=1e-15)


def test_minibatch_is_seeded_and_labelled():
    data = tiny_dataset()
    obj = Objective("logistic-regression", 2, 2)
    x = np.zeros(obj.dim)
    a = gradient(obj, x, data, 2, np.random.default_rng(5))
    b = gradient(obj, x, data, 2, np.random.default_rng(5))
    assert a.batch_kind == "minibatch" and a.sample_count == 2
    assert np.array_equal(a.vector, b.vector)
    full = gradient(obj, x, data)
    assert full.batch_kind == "full" and full.sample_count == 4


def test_errors():
    data = tiny_dataset()
    obj = Objective("logistic-regression", 2, 2)
    with pytest.raises(DimensionMismatchError):
        loss(obj, np.zeros(5), data)
    with pytest.raises(DimensionMismatchError):
        loss(Objective("logistic-regression", 3, 2), np.zeros(8), data)
    with pytest.raises(EmptyDatasetError):
        loss(obj, np.zeros(6), data.subset([]))
    for b in (0, 5):
        with pytest.raises(BatchSizeError):
            gradient(obj, np.zeros(6), data, b, np.random.default_rng(0))
    with pytest.raises(ValueError):
        loss(obj, np.zeros(6), LabeledDataset(np.zeros((1, 2)), np.array([2])))


def test_accuracy_ties_go_to_lowest_class():
    data = tiny_dataset()
    obj = Objective("logistic-regression", 2, 2)
    x = np.zeros(obj.dim)
    assert np.all(predict(obj, x, data) == 0)
    assert accuracy(obj, x, data) == 0.5


def test_init_params():
    rng = np.random.default_rng(0)
    assert not init_params(Objective("logistic-regression", 3, 2)).any()
    mlp = Objective("mlp-1hidden", 3, 2, hidden_width=4)
    x = init_params(mlp, rng)
    W1, W2, b1, b2 = mlp.unpack(x)
    assert W1.any() and W2.any() and not b1.any() and not b2.any()
    with pytest.raises(ValueError):
        init_params(mlp)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_l2_term_property(seed, lam):
    rng = np.random.default_rng(seed)
    data = _data(rng, n=6, d=2, C=2)
    x = rng.standard_normal(6)
    plain = Objective("logistic-regression", 2, 2)
    reg = Objective("logistic-regression", 2, 2, l2_reg=lam)
    assert loss(reg, x, data) == pytest.approx(loss(plain, x, data) + 0.5 * lam * (x @ x), rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(full_gradient(reg, x, data), full_gradient(plain, x, data) + lam * x,
                               rtol=1e-12, atol=1e-12)
