"""Datasets and strongly convex loss models.

The inner objective is the weighted empirical risk
G(theta, w) = sum_i w_i l(theta; x_i), the outer objective the unweighted
mean test loss F(theta). Per-sample regularization (mu/2)||theta||^2 is part
of the training loss l so each per-sample Hessian has lambda_min >= mu; the
outer loss uses the bare fit term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .simplex import SimplexWeights

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n x d) plus targets (reals or class indices)."""

    features: np.ndarray
    targets: np.ndarray
    kind: str = REGRESSION
    n_classes: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        object.__setattr__(self, "features", X)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("features must be a nonempty n x d matrix")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == CLASSIFICATION:
            y = np.asarray(self.targets, dtype=int)
            if self.n_classes is None or self.n_classes < 2:
                raise ValueError("classification needs n_classes >= 2")
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ValueError("class targets out of range")
        else:
            y = np.asarray(self.targets, dtype=float)
            if not np.all(np.isfinite(y)):
                raise ValueError("regression targets must be finite")
        object.__setattr__(self, "targets", y)
        if y.shape != (X.shape[0],):
            raise ValueError("targets must be a length-n vector")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", t)
        if not np.all(np.isfinite(t)):
            raise ValueError("parameters must be finite")


class LossModel:
    """Per-sample loss with gradient and Hessian oracles.

    Subclasses implement the fit term; the (mu/2)||theta||^2 regularizer is
    added here so every per-sample training loss is mu-strongly convex.
    """

    mu: float
    is_quadratic = False

    def n_params(self, data: Dataset) -> int:
        raise NotImplementedError

    # --- fit term (unregularized), also used for the outer loss F ---
    def fit_losses(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def fit_grads(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def fit_weighted_hess_apply(self, theta, data, w_values, v) -> np.ndarray:
        raise NotImplementedError

    def fit_sample_hessians(self, theta, data) -> np.ndarray:
        raise NotImplementedError

    # --- regularized per-sample training loss ---
    def sample_losses(self, theta, data) -> np.ndarray:
        reg = 0.5 * self.mu * float(theta @ theta)
        return self.fit_losses(theta, data) + reg

    def sample_grads(self, theta, data) -> np.ndarray:
        return self.fit_grads(theta, data) + self.mu * theta[None, :]

    def weighted_hess_apply(self, theta, data, w_values, v) -> np.ndarray:
        return self.fit_weighted_hess_apply(theta, data, w_values, v) + self.mu * v

    def sample_hessians(self, theta, data) -> np.ndarray:
        p = self.n_params(data)
        return self.fit_sample_hessians(theta, data) + self.mu * np.eye(p)[None]

    def weighted_hess(self, theta, data, w_values) -> np.ndarray:
        """Explicit weighted Hessian; intended for small p."""
        hs = self.sample_hessians(theta, data)
        return np.einsum("i,ijk->jk", w_values, hs)


class RidgeLeastSquares(LossModel):
    """l(theta; x) = 0.5 (<d, theta> - y)^2 + (mu/2)||theta||^2.

    mu = 0 is allowed when the weighted design is full rank.
    """

    is_quadratic = True

    def __init__(self, mu: float = 0.0):
        if mu < 0:
            raise ValueError("mu must be nonnegative")
        self.mu = float(mu)

    def n_params(self, data: Dataset) -> int:
        return data.d

    def fit_losses(self, theta, data):
        r = data.features @ theta - data.targets
        return 0.5 * r * r

    def fit_grads(self, theta, data):
        r = data.features @ theta - data.targets
        return r[:, None] * data.features

    def fit_weighted_hess_apply(self, theta, data, w_values, v):
        X = data.features
        return X.T @ (w_values * (X @ v))

    def fit_sample_hessians(self, theta, data):
        X = data.features
        return np.einsum("ij,ik->ijk", X, X)


class RegularizedMultinomialLogistic(LossModel):
    """Cross-entropy for a linear model plus (mu/2)||theta||^2.

    Logits are theta reshaped to C x d; regularization covers all
    coordinates. Default mu = 1e-2.
    """

    def __init__(self, mu: float = 1e-2):
        if mu < 0:
            raise ValueError("mu must be nonnegative")
        self.mu = float(mu)

    def n_params(self, data: Dataset) -> int:
        if data.kind != CLASSIFICATION:
            raise ValueError("logistic model needs a classification dataset")
        return data.n_classes * data.d

    def _probs(self, theta, data):
        W = theta.reshape(data.n_classes, data.d)
        logits = data.features @ W.T
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def fit_losses(self, theta, data):
        pi = self._probs(theta, data)
        idx = np.arange(data.n)
        return -np.log(np.maximum(pi[idx, data.targets], 1e-300))

    def fit_grads(self, theta, data):
        pi = self._probs(theta, data)
        pi = pi.copy()
        pi[np.arange(data.n), data.targets] -= 1.0
        # grad_i = (pi_i - e_{y_i}) (x) x_i, flattened row-major (C x d)
        return np.einsum("ic,id->icd", pi, data.features).reshape(data.n, -1)

    def fit_weighted_hess_apply(self, theta, data, w_values, v):
        C, d = data.n_classes, data.d
        pi = self._probs(theta, data)
        V = v.reshape(C, d)
        A = data.features @ V.T  # n x C
        B = pi * A - pi * np.sum(pi * A, axis=1, keepdims=True)
        return ((w_values[:, None] * B).T @ data.features).reshape(-1)

    def fit_sample_hessians(self, theta, data):
        pi = self._probs(theta, data)
        S = np.einsum("ic,ck->ick", pi, np.eye(data.n_classes)) - np.einsum(
            "ic,ik->ick", pi, pi
        )
        xx = np.einsum("ij,ik->ijk", data.features, data.features)
        # kron(S_i, x_i x_i^T) for each sample, row-major (C x d) flattening
        H = np.einsum("ick,ijl->icjkl", S, xx)
        p = data.n_classes * data.d
        return H.reshape(data.n, p, p)


def inner_loss(model, data, theta: ModelParams, w: SimplexWeights) -> float:
    """Weighted training objective G(theta, w) = sum_i w_i l(theta; x_i)."""
    return float(w.values @ model.sample_losses(theta.theta, data))


def inner_grad(model, data, theta: ModelParams, w: SimplexWeights) -> np.ndarray:
    return model.sample_grads(theta.theta, data).T @ w.values


def inner_hess_apply(model, data, theta: ModelParams, w: SimplexWeights, v) -> np.ndarray:
    """Action of the weighted inner Hessian, never materialized."""
    return model.weighted_hess_apply(theta.theta, data, w.values, np.asarray(v, float))


def gradient_matrix(model, data, theta: ModelParams) -> np.ndarray:
    """n x p matrix with row i = grad of the per-sample training loss."""
    return model.sample_grads(theta.theta, data)


def outer_loss(model, test_data, theta: ModelParams) -> float:
    """Mean test loss F(theta), unregularized."""
    return float(model.fit_losses(theta.theta, test_data).mean())


def outer_grad(model, test_data, theta: ModelParams) -> np.ndarray:
    return model.fit_grads(theta.theta, test_data).mean(axis=0)


def accuracy(model, data: Dataset, theta: ModelParams) -> float:
    """Classification accuracy of the linear model on a dataset."""
    if data.kind != CLASSIFICATION:
        raise ValueError("accuracy needs a classification dataset")
    W = theta.theta.reshape(data.n_classes, data.d)
    pred = (data.features @ W.T).argmax(axis=1)
    return float((pred == data.targets).mean())
