import numpy as np
import pytest

from bilevel_reweight import (
    Dataset,
    ModelParams,
    RegularizedMultinomialLogistic,
    RidgeLeastSquares,
    SimplexWeights,
    gradient_matrix,
    inner_grad,
    inner_hess_apply,
    inner_loss,
    outer_grad,
    outer_loss,
)


def ridge_instance(rng, n=12, d=4, mu=0.2):
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    return RidgeLeastSquares(mu), Dataset(X, y)


def logistic_instance(rng, n=10, d=3, C=3, mu=1e-2):
    X = rng.standard_normal((n, d))
    y = rng.integers(0, C, size=n)
    return (RegularizedMultinomialLogistic(mu),
            Dataset(X, y, "classification", n_classes=C))


def fd_grad(fun, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (fun(x + e) - fun(x - e)) / (2 * eps)
    return g


class TestInnerLoss:
    def test_one_hot_reduces_to_single_sample(self):
        rng = np.random.default_rng(0)
        model, data = ridge_instance(rng)
        theta = ModelParams(rng.standard_normal(data.d))
        w = SimplexWeights.one_hot(data.n, 3)
        expected = model.sample_losses(theta.theta, data)[3]
        assert inner_loss(model, data, theta, w) == pytest.approx(expected)

    def test_uniform_is_empirical_risk(self):
        rng = np.random.default_rng(1)
        model, data = ridge_instance(rng)
        theta = ModelParams(rng.standard_normal(data.d))
        g = inner_loss(model, data, theta, SimplexWeights.uniform(data.n))
        assert g == pytest.approx(model.sample_losses(theta.theta, data).mean())

    def test_ridge_at_zero(self):
        rng = np.random.default_rng(2)
        model, data = ridge_instance(rng, mu=0.0)
        w = SimplexWeights.from_unnormalized(rng.random(data.n))
        theta = ModelParams(np.zeros(data.d))
        expected = float(w.values @ (0.5 * data.targets**2))
        assert inner_loss(model, data, theta, w) == pytest.approx(expected)


class TestInnerGrad:
    @pytest.mark.parametrize("make", [ridge_instance, logistic_instance])
    def test_finite_differences(self, make):
        rng = np.random.default_rng(3)
        model, data = make(rng)
        p = model.n_params(data)
        theta = ModelParams(0.3 * rng.standard_normal(p))
        w = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.1)
        g = inner_grad(model, data, theta, w)
        fd = fd_grad(lambda t: inner_loss(model, data, ModelParams(t), w),
                     theta.theta)
        assert np.linalg.norm(g - fd) <= 1e-6 * (1 + np.linalg.norm(fd))

    def test_zero_at_normal_equations_solution(self):
        rng = np.random.default_rng(4)
        model, data = ridge_instance(rng, mu=0.3)
        w = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.1)
        X, y = data.features, data.targets
        A = X.T @ (w.values[:, None] * X) + model.mu * np.eye(data.d)
        theta = ModelParams(np.linalg.solve(A, X.T @ (w.values * y)))
        assert np.linalg.norm(inner_grad(model, data, theta, w)) <= 1e-10

    def test_linearity_in_weights(self):
        rng = np.random.default_rng(5)
        model, data = ridge_instance(rng)
        theta = ModelParams(rng.standard_normal(data.d))
        w1 = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.1)
        w2 = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.1)
        a = 0.3
        mix = SimplexWeights(a * w1.values + (1 - a) * w2.values)
        lhs = inner_grad(model, data, theta, mix)
        rhs = (a * inner_grad(model, data, theta, w1)
               + (1 - a) * inner_grad(model, data, theta, w2))
        assert np.allclose(lhs, rhs)


class TestHessian:
    @pytest.mark.parametrize("make", [ridge_instance, logistic_instance])
    def test_apply_matches_explicit(self, make):
        rng = np.random.default_rng(6)
        model, data = make(rng)
        p = model.n_params(data)
        theta = ModelParams(0.2 * rng.standard_normal(p))
        w = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.1)
        H = model.weighted_hess(theta.theta, data, w.values)
        for _ in range(5):
            v = rng.standard_normal(p)
            assert np.allclose(inner_hess_apply(model, data, theta, w, v),
                               H @ v, atol=1e-10)

    def test_zero_vector(self):
        rng = np.random.default_rng(7)
        model, data = ridge_instance(rng)
        theta = ModelParams(rng.standard_normal(data.d))
        w = SimplexWeights.uniform(data.n)
        assert np.allclose(
            inner_hess_apply(model, data, theta, w, np.zeros(data.d)), 0.0)

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        model, data = logistic_instance(rng)
        p = model.n_params(data)
        theta = ModelParams(0.2 * rng.standard_normal(p))
        w = SimplexWeights.uniform(data.n)
        u, v = rng.standard_normal(p), rng.standard_normal(p)
        lhs = u @ inner_hess_apply(model, data, theta, w, v)
        rhs = v @ inner_hess_apply(model, data, theta, w, u)
        assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))

    def test_logistic_strong_convexity(self):
        rng = np.random.default_rng(9)
        model, data = logistic_instance(rng, mu=1e-2)
        p = model.n_params(data)
        theta = ModelParams(0.5 * rng.standard_normal(p))
        w = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.1)
        for _ in range(20):
            v = rng.standard_normal(p)
            quad = v @ inner_hess_apply(model, data, theta, w, v)
            assert quad >= model.mu * (v @ v) - 1e-12

    def test_per_sample_hessian_eigenvalue_floor(self):
        # Assumption: every per-sample Hessian has lambda_min >= mu
        rng = np.random.default_rng(10)
        for make, mu in [(ridge_instance, 0.2), (logistic_instance, 1e-2)]:
            model, data = make(rng, mu=mu)
            p = model.n_params(data)
            theta = ModelParams(0.3 * rng.standard_normal(p))
            hs = model.sample_hessians(theta.theta, data)
            for H in hs:
                assert np.linalg.eigvalsh(H).min() >= mu - 1e-10


class TestGradientMatrix:
    def test_single_row(self):
        rng = np.random.default_rng(11)
        model, data = ridge_instance(rng, n=1)
        theta = ModelParams(rng.standard_normal(data.d))
        row = gradient_matrix(model, data, theta)[0]
        g = inner_grad(model, data, theta, SimplexWeights.one_hot(1, 0))
        assert np.allclose(row, g)

    def test_transpose_action_equals_inner_grad(self):
        rng = np.random.default_rng(12)
        model, data = logistic_instance(rng)
        p = model.n_params(data)
        theta = ModelParams(0.2 * rng.standard_normal(p))
        for _ in range(5):
            w = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.01)
            assert np.allclose(gradient_matrix(model, data, theta).T @ w.values,
                               inner_grad(model, data, theta, w))

    def test_ridge_rows_at_zero(self):
        rng = np.random.default_rng(13)
        model, data = ridge_instance(rng, mu=0.0)
        rows = gradient_matrix(model, data, ModelParams(np.zeros(data.d)))
        expected = -data.targets[:, None] * data.features
        assert np.allclose(rows, expected)


class TestOuter:
    def test_single_test_sample(self):
        rng = np.random.default_rng(14)
        model, _ = ridge_instance(rng)
        test = Dataset(rng.standard_normal((1, 4)), rng.standard_normal(1))
        theta = ModelParams(rng.standard_normal(4))
        expected = model.fit_losses(theta.theta, test)[0]
        assert outer_loss(model, test, theta) == pytest.approx(expected)

    def test_gradient_zero_at_minimizer(self):
        rng = np.random.default_rng(15)
        model = RidgeLeastSquares(0.0)
        test = Dataset(rng.standard_normal((20, 3)), rng.standard_normal(20))
        X, y = test.features, test.targets
        theta = ModelParams(np.linalg.solve(X.T @ X, X.T @ y))
        assert np.linalg.norm(outer_grad(model, test, theta)) <= 1e-8

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(16)
        model, _ = logistic_instance(rng)
        test = Dataset(rng.standard_normal((15, 3)),
                       rng.integers(0, 3, 15), "classification", n_classes=3)
        theta = ModelParams(0.3 * rng.standard_normal(9))
        fd = fd_grad(lambda t: outer_loss(model, test, ModelParams(t)),
                     theta.theta)
        g = outer_grad(model, test, theta)
        assert np.linalg.norm(g - fd) <= 1e-6 * (1 + np.linalg.norm(fd))


class TestStrongConvexity:
    def test_inner_objective_monotone_gradient(self):
        rng = np.random.default_rng(17)
        model, data = logistic_instance(rng, mu=0.05)
        p = model.n_params(data)
        w = SimplexWeights.from_unnormalized(rng.random(data.n) + 0.1)
        for _ in range(50):
            t1 = ModelParams(rng.standard_normal(p))
            t2 = ModelParams(rng.standard_normal(p))
            dg = (inner_grad(model, data, t1, w)
                  - inner_grad(model, data, t2, w))
            dt = t1.theta - t2.theta
            assert dg @ dt >= model.mu * (dt @ dt) - 1e-10


class TestDatasetValidation:
    def test_class_targets_out_of_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 5], "classification", n_classes=3)

    def test_nonfinite_features(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.inf, 0.0]]), [1.0])
