"""Differentiable objectives over flat parameter vectors.

Parameter layouts (all weight matrices row-major, weights before biases):

``logistic-regression``
    ``W`` (num_classes x input_dim), then ``b`` (num_classes).
``mlp-1hidden``
    ``W1`` (hidden x input_dim), ``W2`` (num_classes x hidden), then
    ``b1`` (hidden), ``b2`` (num_classes). Hidden activation is tanh.
``least-squares``
    ``w`` (input_dim). Loss is ``0.5 * mean((a . w - y)^2)`` with the integer
    label used as the regression target. Small quadratic test problems only.

Every loss is a sample mean plus ``l2_reg * ||x||^2 / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import BatchSizeError, DimensionMismatchError, EmptyDatasetError

KINDS = ("logistic-regression", "mlp-1hidden", "least-squares")


@dataclass(frozen=True)
class Objective:
    kind: str
    input_dim: int
    num_classes: int = 2
    hidden_width: int = 0
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.kind != "least-squares" and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "mlp-1hidden" and self.hidden_width < 1:
            raise ValueError("mlp-1hidden requires hidden_width >= 1")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")

    @property
    def dim(self) -> int:
        D, C, H = self.input_dim, self.num_classes, self.hidden_width
        if self.kind == "logistic-regression":
            return C * D + C
        if self.kind == "mlp-1hidden":
            return H * D + C * H + H + C
        return D

    def unpack(self, x: np.ndarray):
        D, C, H = self.input_dim, self.num_classes, self.hidden_width
        if self.kind == "logistic-regression":
            return x[: C * D].reshape(C, D), x[C * D:]
        if self.kind == "mlp-1hidden":
            o = 0
            W1 = x[o:o + H * D].reshape(H, D); o += H * D
            W2 = x[o:o + C * H].reshape(C, H); o += C * H
            b1 = x[o:o + H]; o += H
            return W1, W2, b1, x[o:o + C]
        return (x,)


@dataclass(frozen=True)
class GradientEstimate:
    vector: np.ndarray
    sample_count: int
    batch_kind: str  # "full" | "minibatch"


def _check(obj: Objective, x: np.ndarray, data: LabeledDataset) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != obj.dim:
        raise DimensionMismatchError("parameter vector", obj.dim, int(x.size))
    if data.n == 0:
        raise EmptyDatasetError()
    if data.input_dim != obj.input_dim:
        raise DimensionMismatchError("feature", obj.input_dim, data.input_dim)
    if obj.kind != "least-squares" and data.labels.max() >= obj.num_classes:
        raise ValueError(
            f"label {int(data.labels.max())} out of range for {obj.num_classes} classes"
        )
    return x


def _logits(obj: Objective, x: np.ndarray, A: np.ndarray):
    if obj.kind == "logistic-regression":
        W, b = obj.unpack(x)
        return A @ W.T + b, None
    W1, W2, b1, b2 = obj.unpack(x)
    h = np.tanh(A @ W1.T + b1)
    return h @ W2.T + b2, h


def _cross_entropy(Z: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = Z.shape[0]
    Zs = Z - Z.max(axis=1, keepdims=True)
    expZ = np.exp(Zs)
    sumexp = expZ.sum(axis=1)
    lse = np.log(sumexp)
    value = float(np.mean(lse - Zs[np.arange(n), y]))
    G = expZ / sumexp[:, None]
    G[np.arange(n), y] -= 1.0
    return value, G / n


def _value_and_grad(obj: Objective, x: np.ndarray, data: LabeledDataset, want_grad: bool):
    A, y = data.features, data.labels
    n = A.shape[0]
    if obj.kind == "least-squares":
        r = A @ x - y
        value = 0.5 * float(np.mean(r * r))
        grad = A.T @ r / n if want_grad else None
    else:
        Z, h = _logits(obj, x, A)
        value, G = _cross_entropy(Z, y)
        grad = None
        if want_grad:
            if obj.kind == "logistic-regression":
                grad = np.concatenate([(G.T @ A).ravel(), G.sum(axis=0)])
            else:
                _, W2, _, _ = obj.unpack(x)
                Gh = (G @ W2) * (1.0 - h * h)
                grad = np.concatenate(
                    [(Gh.T @ A).ravel(), (G.T @ h).ravel(), Gh.sum(axis=0), G.sum(axis=0)]
                )
    if obj.l2_reg:
        value += 0.5 * obj.l2_reg * float(x @ x)
        if want_grad:
            grad = grad + obj.l2_reg * x
    return value, grad


def loss(obj: Objective, x, data: LabeledDataset) -> float:
    x = _check(obj, x, data)
    return _value_and_grad(obj, x, data, want_grad=False)[0]


def gradient(
    obj: Objective,
    x,
    data: LabeledDataset,
    batch: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradientEstimate:
    """Full-batch gradient (``batch=None``) or a minibatch gradient.

    Minibatches are drawn uniformly without replacement from ``data`` using
    ``rng``; indices are sorted so equal subsets give bit-identical results.
    """
    x = _check(obj, x, data)
    if batch is None:
        return GradientEstimate(_value_and_grad(obj, x, data, True)[1], data.n, "full")
    if batch < 1 or batch > data.n:
        raise BatchSizeError(f"batch size {batch} must be in [1, {data.n}]")
    if rng is None:
        raise ValueError("minibatch gradient requires an rng")
    idx = np.sort(rng.choice(data.n, size=batch, replace=False))
    sub = data.subset(idx)
    return GradientEstimate(_value_and_grad(obj, x, sub, True)[1], batch, "minibatch")


def full_gradient(obj: Objective, x, data: LabeledDataset) -> np.ndarray:
    return gradient(obj, x, data).vector


def finite_diff_check(obj: Objective, x, data: LabeledDataset, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + step)."""
    if not step > 0:
        raise ValueError("step must be > 0")
    x = _check(obj, x, data)
    g = full_gradient(obj, x, data)
    worst = 0.0
    e = np.zeros_like(x)
    for i in range(x.size):
        e[i] = step
        fd = (loss(obj, x + e, data) - loss(obj, x - e, data)) / (2.0 * step)
        e[i] = 0.0
        worst = max(worst, abs(g[i] - fd) / (abs(g[i]) + step))
    return worst


def predict(obj: Objective, x, data: LabeledDataset) -> np.ndarray:
    x = _check(obj, x, data)
    if obj.kind == "least-squares":
        raise ValueError("least-squares objective has no class predictions")
    Z, _ = _logits(obj, x, data.features)
    return np.argmax(Z, axis=1)


def accuracy(obj: Objective, x, data: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    return float(np.mean(predict(obj, x, data) == data.labels))


def init_params(obj: Objective, rng: np.random.Generator | None = None, scale: float = 0.1) -> np.ndarray:
    """Zeros for linear models; small Gaussian weights for the MLP (breaks symmetry)."""
    x = np.zeros(obj.dim)
    if obj.kind == "mlp-1hidden":
        if rng is None:
            raise ValueError("mlp-1hidden initialisation requires an rng")
        D, C, H = obj.input_dim, obj.num_classes, obj.hidden_width
        n_w = H * D + C * H
        x[:n_w] = scale * rng.standard_normal(n_w)
    return x
