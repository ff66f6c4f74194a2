import numpy as np
import pytest

from abgame.attack import (
    HalfplaneERM,
    LowerLevelProblem,
    NearestNeighbor,
    extract,
    fit_lower,
    init_queries,
    solve_inner,
)
from abgame.batch import LabeledBatch
from abgame.defense import DefenseOracle, Identity
from abgame.errors import DimensionError, DivergenceError, ParameterError
from abgame.metrics import adversary_utility
from abgame.models import grad_beta, init_model, linear_model, objective, ridge_closed_form
from abgame.numeric import make_rng


class TestInitQueries:
    def test_deterministic(self):
        a = init_queries(200, 2, "gaussian", make_rng(3))
        b = init_queries(200, 2, "gaussian", make_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_uniform_mean(self):
        Q = init_queries(100_000, 2, "uniform", make_rng(0), -10, 10)
        assert np.all(np.abs(Q.mean(axis=0)) <= 0.05)
        assert Q.min() >= -10 and Q.max() <= 10

    def test_single_row(self):
        assert init_queries(1, 3, "gaussian", make_rng(0)).shape == (1, 3)

    def test_errors(self):
        with pytest.raises(ParameterError):
            init_queries(5, 2, "uniform", make_rng(0), 1.0, -1.0)
        with pytest.raises(ParameterError):
            init_queries(5, 2, "sobol", make_rng(0))
        with pytest.raises(DimensionError):
            init_queries(0, 2)


class TestProblem:
    @pytest.mark.parametrize("kw", [{"ridge": 0.0}, {"tol": 0.0}, {"solver": "adam"}, {"kind": "cnn"},
                                    {"loss": "hinge"}, {"max_iter": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            LowerLevelProblem(**kw)

    def test_targets(self):
        b = LabeledBatch(np.zeros((2, 1)), np.array([1.0, -1.0]), "hard")
        np.testing.assert_array_equal(LowerLevelProblem().targets(b), [1.0, 0.0])
        np.testing.assert_array_equal(LowerLevelProblem(loss="squared").targets(b), [1.0, -1.0])


class TestFitLower:
    @pytest.mark.parametrize("solver", ["gd", "newton", "lbfgs"])
    def test_squared_matches_closed_form(self, solver, rng):
        X = rng.normal(size=(30, 3))
        y = rng.normal(size=30)
        prob = LowerLevelProblem("linear", "squared", ridge=0.1, tol=1e-9, solver=solver, max_iter=20000)
        beta, tr = solve_inner(prob, X, y, np.zeros(4))
        assert tr.converged
        np.testing.assert_allclose(beta, ridge_closed_form(X, y, 0.1, fit_intercept=True), atol=1e-6)

    def test_unique_from_two_starts(self, rng):
        X = rng.normal(size=(25, 2))
        y = rng.normal(size=25)
        prob = LowerLevelProblem("linear", "squared", ridge=0.05, tol=1e-9)
        b1, _ = solve_inner(prob, X, y, rng.normal(size=3) * 5)
        b2, _ = solve_inner(prob, X, y, rng.normal(size=3) * 5)
        assert np.linalg.norm(b1 - b2) <= 1e-5

    def test_realizable_recovers_beta0(self, rng):
        X = rng.normal(size=(40, 2))
        beta0 = np.array([0.5, -1.0, 0.3])
        y = linear_model(beta0[:2], beta0[2]).raw(X)
        prob = LowerLevelProblem("linear", "squared", ridge=1e-9, tol=1e-10, solver="newton")
        beta, _ = solve_inner(prob, X, y, np.zeros(3))
        np.testing.assert_allclose(beta, beta0, atol=1e-6)
        assert objective(prob.template(2, beta), X, "squared", y) < 1e-10

    def test_separable_data_bounded(self):
        X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
        batch = LabeledBatch(X, np.array([-1.0, -1.0, 1.0, 1.0]), "hard")
        beta, tr = fit_lower(LowerLevelProblem(ridge=0.1, tol=1e-8), batch, np.zeros(2))
        assert tr.converged and np.all(np.isfinite(beta)) and np.linalg.norm(beta) < 10

    @pytest.mark.parametrize("solver", ["gd", "newton", "lbfgs", "sgd"])
    def test_descent(self, solver, rng):
        X = rng.normal(size=(50, 2))
        t = rng.uniform(size=50)
        beta0 = rng.normal(size=3) * 3
        prob = LowerLevelProblem(ridge=0.05, tol=1e-6, solver=solver, max_iter=300, batch_size=10, step0=0.5)
        beta, tr = solve_inner(prob, X, t, beta0, make_rng(0))
        m = prob.template(2, beta)
        assert objective(m, X, "xent", t, 0.05) <= objective(prob.template(2, beta0), X, "xent", t, 0.05)
        assert tr.grad_norms[-1] == pytest.approx(np.linalg.norm(grad_beta(m, X, "xent", t, 0.05)), rel=1e-9)

    def test_tolerance_met(self, rng):
        X = rng.normal(size=(60, 3))
        t = rng.uniform(size=60)
        prob = LowerLevelProblem(tol=1e-6)
        beta, tr = solve_inner(prob, X, t, np.zeros(4))
        assert tr.converged and not tr.hit_max_iter
        assert np.linalg.norm(grad_beta(prob.template(3, beta), X, "xent", t, prob.ridge)) <= 1e-6

    def test_max_iter_flag(self, rng):
        X = rng.normal(size=(60, 3))
        t = rng.uniform(size=60)
        _, tr = solve_inner(LowerLevelProblem(tol=1e-12, max_iter=3), X, t, np.zeros(4))
        assert tr.hit_max_iter and not tr.converged and tr.iterations == 3

    def test_divergence_detected(self, rng):
        X = rng.normal(size=(20, 2)) * 10
        y = rng.normal(size=20)
        prob = LowerLevelProblem("linear", "squared", solver="gd", backtrack=False, step0=1.0, max_iter=500)
        with pytest.raises(DivergenceError):
            solve_inner(prob, X, y, np.zeros(3))

    def test_mlp_fits(self, rng):
        X = rng.normal(size=(40, 2))
        y = np.where(X[:, 0] * X[:, 1] > 0, 1.0, -1.0)
        prob = LowerLevelProblem("mlp2", ridge=1e-3, tol=1e-5, solver="lbfgs", hidden=8)
        beta, _ = fit_lower(prob, LabeledBatch(X, y, "hard"), None, make_rng(1))
        assert np.mean(prob.template(2, beta).hard(X) == y) > 0.9

    def test_newton_refuses_large_models(self, rng):
        prob = LowerLevelProblem("mlp2", solver="newton", hidden=200)
        with pytest.raises(ParameterError):
            solve_inner(prob, rng.normal(size=(5, 3)), np.zeros(5))

    def test_bad_targets(self):
        with pytest.raises(DimensionError):
            solve_inner(LowerLevelProblem(), np.zeros((3, 2)), np.zeros(2))


class TestExtract:
    def test_identity_defense_extracts(self):
        server = linear_model([1.0, -1.0], 1.0)
        Q = init_queries(200, 2, "gaussian", make_rng(0))
        f_A = extract(DefenseOracle(server, Identity()), Q, LowerLevelProblem(solver="newton"))
        T = make_rng(1).uniform(-10, 10, size=(100_000, 2))
        assert 1.0 - adversary_utility(f_A, server, T) <= 0.02

    def test_dimension_check(self):
        with pytest.raises(DimensionError):
            extract(DefenseOracle(linear_model([1.0, 1.0])), np.zeros((3, 3)), LowerLevelProblem())

    def test_more_queries_do_not_hurt(self):
        server = linear_model([1.0, -1.0, 0.5], 0.2)
        T = make_rng(99).uniform(-3, 3, size=(20_000, 3))
        prob = LowerLevelProblem(solver="newton")

        def dis(n, s):
            Q = make_rng(s, "q").uniform(-3, 3, size=(n, 3))
            return 1.0 - adversary_utility(extract(DefenseOracle(server), Q, prob), server, T)

        small = np.median([dis(25, s) for s in range(20)])
        large = np.median([dis(50, s) for s in range(20)])
        assert large <= small


class TestNonParametricAdversaries:
    def test_nearest_neighbor_interpolates(self, rng):
        X = rng.normal(size=(50, 3))
        y = np.where(rng.random(50) < 0.5, 1.0, -1.0)
        f = NearestNeighbor()(LabeledBatch(X, y, "hard"))
        np.testing.assert_array_equal(f.hard(X), y)

    def test_halfplane_erm_zero_risk_on_separable(self, rng):
        X = rng.uniform(-1, 1, size=(300, 2))
        y = linear_model([1.0, -2.0], 0.1).hard(X).astype(float)
        f = HalfplaneERM()(LabeledBatch(X, y, "hard"))
        np.testing.assert_array_equal(f.hard(X), y)

    def test_soft_labels_rejected(self):
        b = LabeledBatch(np.zeros((2, 2)), np.array([0.2, 0.9]), "soft")
        with pytest.raises(ParameterError):
            NearestNeighbor()(b)
        with pytest.raises(ParameterError):
            HalfplaneERM()(b)

    def test_halfplane_needs_2d(self):
        with pytest.raises(DimensionError):
            HalfplaneERM()(LabeledBatch(np.zeros((2, 3)), np.array([1.0, -1.0]), "hard"))
