"""Continuous-time layer: flows, stationarity and stability certificates.

The mirror flow w' = -P(w) phi(w) is integrated in dual coordinates
u = log-weights: u' = -phi(softmax(u)) with w = softmax(u), which is exactly
equivalent, preserves the simplex by construction, and keeps zero weights
zero. The joint bilevel flow couples theta' = -alpha grad G with the mirror
flow driven by the plug-in hypergradient.

Stationary points are weight vectors whose field is constant over the
support; their stability is read off the Jacobian of Phi(w) = P(w) phi(w)
restricted to the tangent space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import List, Optional

import numpy as np
import scipy.linalg

from .errors import PreconditionError
from .hypergrad import (
    DEFAULT_CONFIG,
    FrozenField,
    frozen_field,
    hypergrad,
)
from .losses import ModelParams, inner_grad, inner_loss, outer_loss
from .simplex import (
    DEFAULT_SUPPORT_TOL,
    SimplexWeights,
    TangentVector,
    entropy,
    preconditioner,
    support,
)
from .solvers import FlowTrace, TraceRecord, solve_inner


@dataclass(frozen=True)
class FlowConfig:
    alpha: float = 1.0
    beta: float = 1.0
    dt: float = 1e-3
    t_max: float = 10.0
    stationarity_tol: float = 1e-8
    oscillation_window: int = 50

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.dt <= 0 or self.t_max <= 0 or self.dt >= self.t_max:
            raise ValueError("need 0 < dt < t_max")
        if self.stationarity_tol <= 0:
            raise ValueError("stationarity_tol must be positive")
        if self.oscillation_window < 2:
            raise ValueError("oscillation_window must be >= 2")


class ConstantField:
    """A field that ignores the weights."""

    def __init__(self, phi):
        self.phi = np.asarray(phi, dtype=float)

    def __call__(self, w: SimplexWeights) -> np.ndarray:
        return self.phi

    def eval_raw(self, values) -> np.ndarray:
        return self.phi


class ExactHypergradField:
    """Oracle field psi(theta*(w), w): the true gradient of the value
    function, backed by a high-precision inner solve per evaluation."""

    def __init__(self, model, data, test_data, inner_tol: float = 1e-12,
                 hcfg=DEFAULT_CONFIG):
        self.model = model
        self.data = data
        self.test_data = test_data
        self.inner_tol = inner_tol
        self.hcfg = hcfg
        self._theta0 = ModelParams(np.zeros(model.n_params(data)))

    def __call__(self, w: SimplexWeights) -> np.ndarray:
        theta = solve_inner(self.model, self.data, w, self._theta0,
                            tol=self.inner_tol)
        return hypergrad(self.model, self.data, self.test_data, theta, w,
                         self.hcfg)


def _softmax(u: np.ndarray) -> np.ndarray:
    z = u - u.max()
    e = np.exp(z)
    return e / e.sum()


def _dual_record(t, u) -> TraceRecord:
    w = SimplexWeights(_softmax(u))
    return TraceRecord(
        k=t, theta=None, w=w,
        inner_loss=math.nan, outer_loss=math.nan,
        entropy=entropy(w), support_size=int(support(w).size))


def _rk4(state: np.ndarray, h: float, deriv) -> np.ndarray:
    k1 = deriv(state)
    k2 = deriv(state + 0.5 * h * k1)
    k3 = deriv(state + 0.5 * h * k2)
    k4 = deriv(state + h * k3)
    return state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _record_grid(t_max: float, record_times, n_default: int = 500):
    if record_times is None:
        return np.linspace(0.0, t_max, n_default + 1)
    grid = np.asarray(record_times, dtype=float)
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    return grid


def integrate_mirror_flow(field, w0: SimplexWeights, cfg: FlowConfig,
                          record_times=None) -> FlowTrace:
    """Fixed-step RK4 on the dual variable; hits record times exactly."""
    if np.any(w0.values <= 0):
        raise ValueError("w0 must lie in the simplex interior")
    u = np.log(w0.values)
    deriv = lambda uu: -field(SimplexWeights(_softmax(uu)))
    grid = _record_grid(cfg.t_max, record_times)
    trace = FlowTrace()
    trace.append(_dual_record(grid[0], u))
    for t0, t1 in zip(grid[:-1], grid[1:]):
        n_steps = max(1, math.ceil((t1 - t0) / cfg.dt))
        h = (t1 - t0) / n_steps
        for _ in range(n_steps):
            u = _rk4(u, h, deriv)
            u -= u.max()  # recenter to keep exp well-scaled
        trace.append(_dual_record(t1, u))
    return trace


def constant_field_solution(w0: SimplexWeights, phi, t: float) -> SimplexWeights:
    """Closed-form mirror flow for a constant field:
    w(t) = w0 * exp(-t phi), renormalized."""
    z = t * np.asarray(phi, dtype=float)
    z = z - z.min()
    return SimplexWeights.from_unnormalized(w0.values * np.exp(-z))


def integrate_joint_flow(model, data, test_data, theta0: ModelParams,
                         w0: SimplexWeights, cfg: FlowConfig,
                         record_times=None,
                         theta_ref: Optional[ModelParams] = None,
                         hcfg=DEFAULT_CONFIG) -> FlowTrace:
    """Joint flow theta' = -alpha grad G(theta, w), w' = -beta P(w) psi."""
    if cfg.alpha == 0 and cfg.beta == 0:
        raise ValueError("alpha and beta cannot both be zero")
    if np.any(w0.values <= 0):
        raise ValueError("w0 must lie in the simplex interior")
    p = theta0.theta.size
    state = np.concatenate([theta0.theta, np.log(w0.values)])

    def deriv(s):
        th = ModelParams(s[:p])
        w = SimplexWeights(_softmax(s[p:]))
        dth = -cfg.alpha * inner_grad(model, data, th, w)
        du = -cfg.beta * hypergrad(model, data, test_data, th, w, hcfg)
        return np.concatenate([dth, du])

    def make_rec(t, s):
        th = ModelParams(s[:p])
        w = SimplexWeights(_softmax(s[p:]))
        err = None
        if theta_ref is not None:
            err = float(np.linalg.norm(th.theta - theta_ref.theta))
        return TraceRecord(
            k=t, theta=th.theta.copy(), w=w,
            inner_loss=inner_loss(model, data, th, w),
            outer_loss=outer_loss(model, test_data, th),
            entropy=entropy(w), support_size=int(support(w).size),
            theta_err=err)

    grid = _record_grid(cfg.t_max, record_times)
    trace = FlowTrace()
    trace.append(make_rec(grid[0], state))
    for t0, t1 in zip(grid[:-1], grid[1:]):
        n_steps = max(1, math.ceil((t1 - t0) / cfg.dt))
        h = (t1 - t0) / n_steps
        for _ in range(n_steps):
            state = _rk4(state, h, deriv)
            state[p:] -= state[p:].max()
        trace.append(make_rec(t1, state))
    return trace


@dataclass
class StationaryReport:
    """Stationarity / stability / sparsity certificate for a weight vector."""

    w: SimplexWeights
    is_stationary: bool
    support: np.ndarray
    proportionality_residual: float
    offsupport_margin: np.ndarray
    tangent_eigenvalues: Optional[np.ndarray] = None
    is_stable: Optional[bool] = None
    in_I_lp: Optional[bool] = None
    certificate: Optional[dict] = None

    def to_json_dict(self) -> dict:
        eig = None
        if self.tangent_eigenvalues is not None:
            eig = [[float(z.real), float(z.imag)]
                   for z in self.tangent_eigenvalues]
        return {
            "w": self.w.values.tolist(),
            "is_stationary": self.is_stationary,
            "support": [int(i) for i in self.support],
            "proportionality_residual": self.proportionality_residual,
            "offsupport_margin": [float(x) for x in self.offsupport_margin],
            "tangent_eigenvalues": eig,
            "is_stable": self.is_stable,
            "in_I_lp": self.in_I_lp,
        }


def is_stationary(w: SimplexWeights, field, tol: float = 1e-8,
                  support_tol: float = DEFAULT_SUPPORT_TOL) -> StationaryReport:
    """Stationary iff the field is constant over the support of w."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    phi = field(w)
    supp = support(w, support_tol)
    on = phi[supp]
    residual = float(on.max() - on.min()) if supp.size else math.inf
    off = np.setdiff1d(np.arange(w.n), supp)
    margins = phi[off] - float(w.values @ phi)
    stationary = bool(residual <= tol * (1.0 + np.abs(phi).max()))
    return StationaryReport(
        w=w, is_stationary=stationary, support=supp,
        proportionality_residual=residual, offsupport_margin=margins)


def jacobian_field(field, w: SimplexWeights, mode: str = "analytic-frozen",
                   fd_step: float = 1e-6) -> np.ndarray:
    """Jacobian D phi(w) of the field.

    Analytic mode uses the frozen-field structure phi = -Gamma g(w),
    dg/dw_j = -H^{-1} H_j g, giving J_ij = <Gamma_i, H^{-1} H_j g>. The
    finite-difference mode perturbs raw coordinates with central differences.
    """
    if mode == "analytic-frozen":
        if not isinstance(field, FrozenField):
            raise PreconditionError("analytic mode needs a FrozenField")
        H = field.weighted_hessian(w)
        g = scipy.linalg.solve(H, field.grad_outer, assume_a="pos")
        Hg = field.sample_hessians @ g  # (n, p)
        X = scipy.linalg.solve(H, Hg.T, assume_a="pos")  # (p, n)
        return field.gamma @ X
    if mode == "finite-difference":
        if not hasattr(field, "eval_raw"):
            raise PreconditionError("finite-difference mode needs eval_raw")
        n = w.n
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = fd_step
            J[:, j] = (field.eval_raw(w.values + e)
                       - field.eval_raw(w.values - e)) / (2 * fd_step)
        return J
    raise ValueError(f"unknown jacobian mode {mode!r}")


def _tangent_operator_eigs(A: np.ndarray) -> np.ndarray:
    """Eigenvalues of an l x l operator restricted to the tangent space,
    expressed in the basis {e_i - e_l}."""
    l = A.shape[0]
    if l <= 1:
        return np.array([], dtype=complex)
    B = np.vstack([np.eye(l - 1), -np.ones((1, l - 1))])
    M = np.linalg.lstsq(B, A @ B, rcond=None)[0]
    return np.linalg.eigvals(M)


def full_flow_jacobian(w: SimplexWeights, phi: np.ndarray,
                       J: np.ndarray) -> np.ndarray:
    """D Phi(w) for Phi(w) = P(w) phi(w):
    diag(phi) + diag(w) J - <w, phi> I - w (phi^T + w^T J)."""
    v = w.values
    return (np.diag(phi) + v[:, None] * J - (v @ phi) * np.eye(w.n)
            - np.outer(v, phi + J.T @ v))


def stability_check(w: SimplexWeights, field, tol: float = 1e-8,
                    support_tol: float = DEFAULT_SUPPORT_TOL,
                    jacobian_mode: Optional[str] = None) -> StationaryReport:
    """Certify a stationary point: off-support margins must be positive and
    the tangent restriction of P(w~) J~ must have eigenvalues with positive
    real parts."""
    report = is_stationary(w, field, tol, support_tol)
    if not report.is_stationary:
        raise PreconditionError("stability_check needs a stationary point")
    if jacobian_mode is None:
        jacobian_mode = ("analytic-frozen" if isinstance(field, FrozenField)
                         else "finite-difference")
    J = jacobian_field(field, w, jacobian_mode)
    supp = report.support
    w_tilde = SimplexWeights.from_unnormalized(w.values[supp])
    J_tilde = J[np.ix_(supp, supp)]
    A = preconditioner(w_tilde) @ J_tilde
    eigs = _tangent_operator_eigs(A)
    report.tangent_eigenvalues = eigs
    margins_ok = bool(np.all(report.offsupport_margin > tol))
    eigs_ok = bool(np.all(eigs.real > tol)) if eigs.size else True
    report.is_stable = margins_ok and eigs_ok
    if isinstance(field, FrozenField):
        member, cert = membership_I(field.gamma[supp], tol=1e-8)
        report.in_I_lp = member
        report.certificate = cert
    return report


def linearized_trajectory(w_star: SimplexWeights, delta: TangentVector,
                          field, t: float, tol: float = 1e-6) -> SimplexWeights:
    """First-order prediction w(t) = w* + exp(-D Phi(w*) t) delta."""
    report = is_stationary(w_star, field, tol)
    if not report.is_stationary:
        raise PreconditionError("w_star must be stationary")
    d = delta.values
    if np.any(w_star.values + d < -1e-15):
        raise PreconditionError("w_star + delta must lie in the simplex")
    phi = field(w_star)
    if isinstance(field, FrozenField):
        J = jacobian_field(field, w_star, "analytic-frozen")
    elif hasattr(field, "eval_raw"):
        J = jacobian_field(field, w_star, "finite-difference")
    else:
        J = np.zeros((w_star.n, w_star.n))
    DPhi = full_flow_jacobian(w_star, phi, J)
    pred = w_star.values + scipy.linalg.expm(-DPhi * t) @ d
    pred = np.clip(pred, 0.0, None)
    return SimplexWeights.from_unnormalized(pred)


def membership_I(Z: np.ndarray, tol: float = 1e-8):
    """Is Z in the set of l x p matrices with 1_l in range(Z) or a
    nontrivial null space? Returns (bool, certificate)."""
    Z = np.asarray(Z, dtype=float)
    l = Z.shape[0]
    ones = np.ones(l)
    x, *_ = np.linalg.lstsq(Z, ones, rcond=None)
    residual = float(np.linalg.norm(Z @ x - ones))
    svals = np.linalg.svd(Z, compute_uv=False)
    sigma_max = float(svals[0]) if svals.size else 0.0
    sigma_min = float(svals[-1]) if Z.shape[1] <= l else 0.0
    if bool(residual <= tol * math.sqrt(l)):
        return True, {"kind": "ones", "x": x.tolist(), "residual": residual}
    if bool(sigma_min <= tol * max(sigma_max, 1.0)):
        return True, {"kind": "null", "sigma_min": sigma_min}
    return False, {"kind": None, "residual": residual, "sigma_min": sigma_min}


def sparsity_certificate(w: SimplexWeights, gamma: np.ndarray,
                         tol: float = 1e-8,
                         support_tol: float = DEFAULT_SUPPORT_TOL):
    """Stationary supports must make Gamma restricted to the support a
    member of I_l^p; generic supports larger than p fail."""
    supp = support(w, support_tol)
    if supp.size == 0:
        raise PreconditionError("empty support")
    return membership_I(np.asarray(gamma, float)[supp], tol)


@dataclass
class OmegaResult:
    """Limit of the frozen-parameter mirror flow, or a non-convergence flag."""

    w: SimplexWeights
    converged: bool
    oscillating: bool
    t: float
    checkpoint_changes: List[float] = dc_field(default_factory=list)


def omega_limit(field, w0: SimplexWeights, cfg: FlowConfig,
                n_checkpoints: int = 500) -> OmegaResult:
    """Integrate the mirror flow until the per-checkpoint change falls below
    stationarity_tol, oscillation is detected, or t_max is reached.
    Non-convergence is an ordinary value, never an error."""
    if np.any(w0.values <= 0):
        # already on a face; one-hot starts are stationary immediately
        phi = field(w0)
        rep = is_stationary(w0, field, max(cfg.stationarity_tol, 1e-12))
        if rep.is_stationary:
            return OmegaResult(w0, True, False, 0.0)
        raise ValueError("w0 must lie in the simplex interior")
    u = np.log(w0.values)
    deriv = lambda uu: -field(SimplexWeights(_softmax(uu)))
    spacing = cfg.t_max / n_checkpoints
    n_steps = max(1, math.ceil(spacing / cfg.dt))
    h = spacing / n_steps
    prev = w0.values
    history = [w0.values]
    changes: List[float] = []
    t = 0.0
    for _ in range(n_checkpoints):
        for _ in range(n_steps):
            u = _rk4(u, h, deriv)
            u -= u.max()
        t += spacing
        cur = _softmax(u)
        change = float(np.linalg.norm(cur - prev))
        changes.append(change)
        if change <= cfg.stationarity_tol:
            return OmegaResult(SimplexWeights(cur), True, False, t, changes)
        win = cfg.oscillation_window
        if len(changes) > win:
            revisits = any(
                np.linalg.norm(cur - past) < 1e-4 for past in history[:-win])
            no_decrease = changes[-1] >= changes[-win] * (1 - 1e-3)
            if revisits and no_decrease:
                return OmegaResult(SimplexWeights(cur), False, True, t, changes)
        history.append(cur)
        prev = cur
    return OmegaResult(SimplexWeights(_softmax(u)), False, False, t, changes)


def integrate_sparse_reference(model, data, test_data, theta0: ModelParams,
                               w0: SimplexWeights, cfg: FlowConfig,
                               record_times=None, refresh_dt: float = 0.1,
                               omega_cfg: Optional[FlowConfig] = None,
                               theta_ref: Optional[ModelParams] = None) -> FlowTrace:
    """Reference trajectory theta' = -grad G(theta, Omega(theta, w0)) with
    the sparse limit Omega refreshed every refresh_dt of slow time and held
    piecewise-constant in between."""
    if omega_cfg is None:
        omega_cfg = FlowConfig(dt=min(cfg.dt, 1e-2), t_max=200.0,
                               stationarity_tol=1e-9)
    p = theta0.theta.size
    theta = theta0.theta.copy()
    grid = _record_grid(cfg.t_max, record_times)
    trace = FlowTrace()
    omega_w: Optional[SimplexWeights] = None
    next_refresh = 0.0
    t = 0.0

    def refresh(th):
        f = frozen_field(model, data, test_data, ModelParams(th))
        return omega_limit(f, w0, omega_cfg).w

    def make_rec(tt, th, w):
        tp = ModelParams(th)
        err = None
        if theta_ref is not None:
            err = float(np.linalg.norm(th - theta_ref.theta))
        return TraceRecord(
            k=tt, theta=th.copy(), w=w,
            inner_loss=inner_loss(model, data, tp, w),
            outer_loss=outer_loss(model, test_data, tp),
            entropy=entropy(w), support_size=int(support(w).size),
            theta_err=err)

    omega_w = refresh(theta)
    next_refresh = refresh_dt
    trace.append(make_rec(0.0, theta, omega_w))
    for t0, t1 in zip(grid[:-1], grid[1:]):
        n_steps = max(1, math.ceil((t1 - t0) / cfg.dt))
        h = (t1 - t0) / n_steps
        for _ in range(n_steps):
            if t >= next_refresh - 1e-12:
                omega_w = refresh(theta)
                next_refresh += refresh_dt
            wfix = omega_w
            dth = lambda th: -inner_grad(model, data, ModelParams(th), wfix)
            theta = _rk4(theta, h, dth)
            t += h
        trace.append(make_rec(t1, theta, omega_w))
    return trace
