"""Hypergradients via implicit differentiation.

The gradient of the value function h(w) = F(theta*(w)) is
Psi(theta*(w), w) with Psi_i = -<grad l_i(theta), H(theta,w)^{-1} grad F(theta)>.
The frozen-parameter field phi(w) = -Gamma g(w) keeps theta fixed and only
lets w act through the weighted Hessian. Finite-difference oracles for h
live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import AssumptionViolationError, SingularDesignError, StepTooLargeError
from .losses import (
    Dataset,
    ModelParams,
    gradient_matrix,
    outer_grad,
    outer_loss,
)
from .simplex import SimplexWeights, TangentVector


@dataclass(frozen=True)
class HypergradConfig:
    """Linear-solver selection for the inner Hessian system."""

    cg_tol: float = 1e-10
    cg_max_iter: int = 0  # 0 means 10 * p
    direct_threshold: int = 64

    def __post_init__(self):
        if not (0 < self.cg_tol <= 1e-2):
            raise ValueError("cg_tol must lie in (0, 1e-2]")


DEFAULT_CONFIG = HypergradConfig()


def _solve_direct(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolationError(
            "inner Hessian is not positive definite"
        ) from exc
    return scipy.linalg.cho_solve((c, low), rhs)


def _solve_cg(apply_H, rhs: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Plain conjugate gradient on a positive definite operator."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = r @ r
    norm_rhs = np.sqrt(rs)
    if norm_rhs == 0.0:
        return x
    for _ in range(max_iter):
        Hp = apply_H(p)
        pHp = p @ Hp
        if pHp <= 0:
            raise AssumptionViolationError("negative curvature in CG")
        alpha = rs / pHp
        x += alpha * p
        r -= alpha * Hp
        rs_new = r @ r
        if np.sqrt(rs_new) <= tol * norm_rhs:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def solve_inner_system(model, data, theta: ModelParams, w: SimplexWeights,
                       rhs, cfg: HypergradConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Solve H v = rhs where H is the weighted inner Hessian at (theta, w)."""
    rhs = np.asarray(rhs, dtype=float)
    p = rhs.size
    if p <= cfg.direct_threshold:
        H = model.weighted_hess(theta.theta, data, w.values)
        return _solve_direct(H, rhs)
    apply_H = lambda v: model.weighted_hess_apply(theta.theta, data, w.values, v)
    max_iter = cfg.cg_max_iter or 10 * p
    return _solve_cg(apply_H, rhs, cfg.cg_tol, max_iter)


def hypergrad(model, data, test_data, theta: ModelParams, w: SimplexWeights,
              cfg: HypergradConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Psi(theta, w): minus the Hessian-metric alignment of each per-sample
    gradient with the outer gradient."""
    gF = outer_grad(model, test_data, theta)
    v = solve_inner_system(model, data, theta, w, gF, cfg)
    return -(gradient_matrix(model, data, theta) @ v)


class FrozenField:
    """The hypergradient field with parameters frozen at theta_0.

    phi(w) = -Gamma g(w) with Gamma the n x p per-sample gradient matrix and
    g(w) = H(w)^{-1} grad F(theta_0), H(w) = sum_i w_i H_i. Carries the
    per-sample Hessians explicitly so the analytic Jacobian is available.
    """

    def __init__(self, gamma: np.ndarray, sample_hessians: np.ndarray,
                 grad_outer: np.ndarray):
        self.gamma = np.asarray(gamma, dtype=float)
        self.sample_hessians = np.asarray(sample_hessians, dtype=float)
        self.grad_outer = np.asarray(grad_outer, dtype=float)
        n, p = self.gamma.shape
        if self.sample_hessians.shape != (n, p, p):
            raise ValueError("sample Hessians must have shape (n, p, p)")
        if self.grad_outer.shape != (p,):
            raise ValueError("outer gradient dimension mismatch")
        self.n = n
        self.p = p

    def weighted_hessian(self, w: SimplexWeights) -> np.ndarray:
        return np.einsum("i,ijk->jk", w.values, self.sample_hessians)

    def g(self, w: SimplexWeights) -> np.ndarray:
        return _solve_direct(self.weighted_hessian(w), self.grad_outer)

    def __call__(self, w: SimplexWeights) -> np.ndarray:
        return -(self.gamma @ self.g(w))

    def eval_raw(self, values: np.ndarray) -> np.ndarray:
        """Evaluate on raw coordinates (may lie slightly off the simplex);
        used by finite-difference Jacobians."""
        H = np.einsum("i,ijk->jk", np.asarray(values, float), self.sample_hessians)
        return -(self.gamma @ _solve_direct(H, self.grad_outer))


def frozen_field(model, data, test_data, theta0: ModelParams,
                 cfg: HypergradConfig = DEFAULT_CONFIG) -> FrozenField:
    """Snapshot the hypergradient field at theta0."""
    gamma = gradient_matrix(model, data, theta0)
    hess = model.sample_hessians(theta0.theta, data)
    gF = outer_grad(model, test_data, theta0)
    return FrozenField(gamma, hess, gF)


def closed_form_inner_quadratic(data: Dataset, w: SimplexWeights,
                                mu: float = 0.0) -> ModelParams:
    """Exact inner minimizer for the ridge model:
    theta*(w) = (sum_i w_i d_i d_i^T + mu I)^{-1} sum_i w_i y_i d_i."""
    X, y = data.features, data.targets
    A = X.T @ (w.values[:, None] * X) + mu * np.eye(data.d)
    b = X.T @ (w.values * y)
    eigvals = np.linalg.eigvalsh(A)
    if eigvals[0] <= 1e-12 * max(1.0, eigvals[-1]):
        raise SingularDesignError(
            "weighted design is singular; enlarge the support or set mu > 0"
        )
    return ModelParams(np.linalg.solve(A, b))


def _value_function(model, data, test_data, w: SimplexWeights,
                    inner_tol: float = 1e-12) -> float:
    """h(w) = F(theta*(w)) with a high-precision inner solve."""
    from .solvers import solve_inner  # local import to avoid a cycle

    if model.is_quadratic:
        theta = closed_form_inner_quadratic(data, w, model.mu)
    else:
        theta = solve_inner(model, data, w, ModelParams(
            np.zeros(model.n_params(data))), tol=inner_tol)
    return outer_loss(model, test_data, theta)


def value_function_fd(model, data, test_data, w: SimplexWeights,
                      direction: TangentVector, eps: float = None) -> float:
    """Central-difference directional derivative of h along a tangent
    direction; the independent oracle for the hypergradient."""
    d = direction.values
    if eps is None:
        eps = 1e-5 * (1.0 + np.abs(w.values).max())
    plus = w.values + eps * d
    minus = w.values - eps * d
    if np.any(plus < 0) or np.any(minus < 0):
        raise StepTooLargeError("finite-difference probe leaves the simplex")
    hp = _value_function(model, data, test_data, SimplexWeights.from_unnormalized(plus))
    hm = _value_function(model, data, test_data, SimplexWeights.from_unnormalized(minus))
    return (hp - hm) / (2.0 * eps)
