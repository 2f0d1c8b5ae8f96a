"""Posterior-probability estimators trained on labeled data.

Two self-contained estimator kinds are provided: multinomial logistic
regression (full-batch gradient descent, deterministic zero initialization)
and k-nearest-neighbor vote fractions. Both map a feature vector to a
probability simplex over the K classes.

Gradient-boosted trees would likely give tighter prediction sets on messy
data, but the coverage guarantee of the calibration procedure is
estimator-agnostic, so these simple deterministic estimators are used
throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = ["ModelKind", "ProbabilityModel", "fit_model", "softmax"]


class ModelKind(Enum):
    MULTINOMIAL_LOGISTIC = "multinomial_logistic"
    K_NEAREST_NEIGHBOR = "k_nearest_neighbor"


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class LogisticParameters:
    weights: np.ndarray  # (d, K)
    bias: np.ndarray  # (K,)
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    loss_history: tuple[float, ...]


@dataclass(frozen=True)
class KnnParameters:
    neighbors: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) in 1..K
    k: int


@dataclass(frozen=True)
class ProbabilityModel:
    """A fitted estimator of the class-posterior simplex."""

    kind: ModelKind
    n_classes: int
    dim: int
    params: LogisticParameters | KnnParameters

    def predict_proba(self, x) -> np.ndarray:
        """Class probabilities for one feature vector or a stack of them.

        Returns shape (K,) for a single vector, (n, K) for a matrix.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {X.shape[1]}")
        if self.kind is ModelKind.MULTINOMIAL_LOGISTIC:
            out = self._logistic_proba(X)
        else:
            out = self._knn_proba(X)
        return out[0] if single else out

    def _logistic_proba(self, X: np.ndarray) -> np.ndarray:
        p = self.params
        Z = (X - p.feature_mean) / p.feature_scale
        return softmax(Z @ p.weights + p.bias)

    def _knn_proba(self, X: np.ndarray) -> np.ndarray:
        p = self.params
        out = np.zeros((X.shape[0], self.n_classes))
        for row, x in enumerate(X):
            d2 = np.sum((p.neighbors - x) ** 2, axis=1)
            # stable sort: ties go to the lower stored index, deterministically
            nearest = np.argsort(d2, kind="stable")[: p.k]
            for lab in p.labels[nearest]:
                out[row, lab - 1] += 1.0
        return out / out.sum(axis=1, keepdims=True)


def _validate_training_data(X: np.ndarray, y: np.ndarray, n_classes: int) -> None:
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if np.unique(y).size < 2:
        raise ValueError("training data must contain at least 2 distinct classes")
    if y.min() < 1 or y.max() > n_classes:
        raise ValueError(f"labels must lie in 1..{n_classes}")


def fit_model(
    features,
    labels,
    kind: ModelKind = ModelKind.MULTINOMIAL_LOGISTIC,
    n_classes: int | None = None,
    l2_penalty: float = 1e-4,
    n_iterations: int = 500,
    step_size: float = 0.1,
    k_neighbors: int = 5,
) -> ProbabilityModel:
    """Fit a posterior-probability model. Deterministic: there is no random
    initialization, so repeated fits on the same data are identical.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if n_classes is None:
        n_classes = int(y.max())
    _validate_training_data(X, y, n_classes)

    if kind is ModelKind.K_NEAREST_NEIGHBOR:
        params = KnnParameters(neighbors=X.copy(), labels=y.copy(), k=k_neighbors)
        return ProbabilityModel(
            kind=kind, n_classes=n_classes, dim=X.shape[1], params=params
        )

    params = _fit_logistic(X, y, n_classes, l2_penalty, n_iterations, step_size)
    return ProbabilityModel(
        kind=ModelKind.MULTINOMIAL_LOGISTIC,
        n_classes=n_classes,
        dim=X.shape[1],
        params=params,
    )


def _fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    l2_penalty: float,
    n_iterations: int,
    step_size: float,
) -> LogisticParameters:
    n, d = X.shape
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    Z = (X - mean) / scale

    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y - 1] = 1.0

    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)

    def loss(W, b):
        P = softmax(Z @ W + b)
        ce = -np.mean(np.log(np.clip(P[np.arange(n), y - 1], 1e-300, None)))
        return ce + 0.5 * l2_penalty * float(np.sum(W * W))

    current = loss(W, b)
    history = [current]
    step = step_size
    for _ in range(n_iterations):
        P = softmax(Z @ W + b)
        G = (P - Y) / n
        gW = Z.T @ G + l2_penalty * W
        gb = G.sum(axis=0)
        # backtracking: halve the step until the full-batch loss does not rise
        while True:
            cand_W = W - step * gW
            cand_b = b - step * gb
            cand_loss = loss(cand_W, cand_b)
            if cand_loss <= current:
                W, b, current = cand_W, cand_b, cand_loss
                break
            if step < 1e-12:
                break  # flat to machine precision; keep current iterate
            step *= 0.5
        history.append(current)

    return LogisticParameters(
        weights=W,
        bias=b,
        feature_mean=mean,
        feature_scale=scale,
        loss_history=tuple(history),
    )
