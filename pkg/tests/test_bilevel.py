import numpy as np
import pytest
from conftest import rel_err
from hypothesis import given
from hypothesis import strategies as st

from abgame.attack import LowerLevelProblem
from abgame.bilevel import (
    BilevelConfig,
    BilevelTrace,
    ascent_lambda,
    hypergrad_x,
    lower_targets,
    run,
    stationarity_proxy,
    upper_objective,
    write_run_artifact,
)
from abgame.defense import Identity, SinePerturb, UniformFlip
from abgame.errors import DimensionError, ParameterError
from abgame.harness.scenarios import gen_t1
from abgame.models import Model, linear_model, loss_value, ridge_closed_form
from abgame.numeric import check_simplex, make_rng, softplus

SERVER = linear_model([1.0, -1.0], 1.0)


def quad_instance(seed, strategy=SinePerturb(0.7, 1.3), mu=0.3):
    """Linear adversary, squared lower loss: beta*(x) is a ridge regression."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(3, 2))
    T = rng.normal(size=(40, 2)) * 2
    y = np.where(rng.random(40) < 0.5, 1.0, -1.0)
    prob = LowerLevelProblem("linear", "squared", ridge=mu)
    return X, T, y, prob, strategy


def H_of_x(X, T, y, prob, strategy):
    q, _ = lower_targets(SERVER, strategy, X, "squared")
    beta = ridge_closed_form(X, q, prob.ridge, fit_intercept=True)
    r = T @ beta[:-1] + beta[-1]
    return float(np.mean(loss_value("xent", r, (y + 1) / 2)))


def analytic_hypergrad(X, T, y, prob, strategy, steps=4000):
    q, dq = lower_targets(SERVER, strategy, X, "squared")
    beta = ridge_closed_form(X, q, prob.ridge, fit_intercept=True)
    return hypergrad_x(Model("linear", 2, beta), X, prob, q, dq, T, y, steps=steps)


class TestUpperObjective:
    def test_single_model(self, rng):
        m = linear_model([0.5, 0.2], -0.1)
        T = rng.normal(size=(10, 2))
        y = np.where(rng.random(10) < 0.5, 1.0, -1.0)
        H, Hj = upper_objective([m], [1.0], T, y)
        expect = np.mean(softplus(m.raw(T)) - (y + 1) / 2 * m.raw(T))
        assert H == pytest.approx(expect) and Hj[0] == pytest.approx(expect)

    def test_one_hot_is_Hj_over_m(self, rng):
        ms = [linear_model(rng.normal(size=2), 0.0) for _ in range(3)]
        T = rng.normal(size=(5, 2))
        y = np.ones(5)
        H, Hj = upper_objective(ms, [0.0, 1.0, 0.0], T, y)
        assert H == Hj[1] / 3

    def test_hand_computed_two_strategies(self):
        # squared upper loss on three points
        T = np.array([[0.0], [1.0], [2.0]])
        y = np.array([1.0, 0.0, 1.0])
        m1 = linear_model([1.0], 0.0)    # residuals -1, 1, 1 -> H1 = 1
        m2 = linear_model([0.0], 1.0)    # residuals 0, 1, 0 -> H2 = 1/3
        H, Hj = upper_objective([m1, m2], [0.5, 0.5], T, y, loss="squared")
        np.testing.assert_allclose(Hj, [1.0, 1 / 3])
        assert H == pytest.approx((1.0 + 1 / 3) / 4)

    def test_empty_test_set(self):
        with pytest.raises(DimensionError):
            upper_objective([SERVER], [1.0], np.zeros((0, 2)), np.zeros(0))


class TestHypergrad:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_closed_form_fd(self, seed):
        inst = quad_instance(seed)
        g = analytic_hypergrad(*inst)
        X = inst[0]
        fd = np.zeros_like(X)
        h = 1e-6
        for i in np.ndindex(X.shape):
            e = np.zeros_like(X)
            e[i] = h
            fd[i] = (H_of_x(X + e, *inst[1:]) - H_of_x(X - e, *inst[1:])) / (2 * h)
        assert rel_err(g, fd) <= 1e-3

    def test_zero_upper_gradient(self, rng):
        X, T, _, prob, g = quad_instance(3)
        q, dq = lower_targets(SERVER, g, X, "squared")
        beta = ridge_closed_form(X, q, prob.ridge, fit_intercept=True)
        m = Model("linear", 2, beta)
        # squared upper loss against the model's own outputs has zero beta-gradient
        out = hypergrad_x(m, X, prob, q, dq, T, m.raw(T), upper_loss="squared")
        np.testing.assert_allclose(out, 0.0, atol=1e-14)

    def test_ridge_shrinks_norm(self):
        norms = []
        for mu in (0.1, 1.0, 10.0):
            norms.append(np.linalg.norm(analytic_hypergrad(*quad_instance(7, mu=mu))))
        assert norms[0] > norms[1] > norms[2]

    def test_logistic_lower_level_fd(self):
        # cross-entropy lower level, solved numerically to tight tolerance
        from abgame.attack import solve_inner

        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 2))
        T = rng.normal(size=(30, 2))
        y = np.where(rng.random(30) < 0.5, 1.0, -1.0)
        g = SinePerturb(1.0, 2.0)
        prob = LowerLevelProblem(ridge=0.5, tol=1e-12, solver="newton")

        def fit(Z):
            q, dq = lower_targets(SERVER, g, Z, "xent")
            beta, _ = solve_inner(prob, Z, q, np.zeros(3))
            return Model("logistic", 2, beta), q, dq

        def H(Z):
            m, _, _ = fit(Z)
            return float(np.mean(loss_value("xent", m.raw(T), (y + 1) / 2)))

        m, q, dq = fit(X)
        an = hypergrad_x(m, X, prob, q, dq, T, y, steps=3000)
        fd = np.zeros_like(X)
        for i in np.ndindex(X.shape):
            e = np.zeros_like(X)
            e[i] = 1e-5
            fd[i] = (H(X + e) - H(X - e)) / 2e-5
        assert rel_err(an, fd) <= 1e-3


class TestAscentLambda:
    def test_equal_losses_unchanged(self):
        lam = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(ascent_lambda(lam, np.full(3, 0.7), 1.0), lam)

    def test_zero_step(self):
        lam = np.array([0.2, 0.8])
        np.testing.assert_array_equal(ascent_lambda(lam, np.array([5.0, 0.0]), 0.0), lam)

    def test_converges_to_argmax(self):
        lam = np.full(4, 0.25)
        Hj = np.array([0.3, 0.9, 0.5, 0.1])
        for k in range(200):
            lam = ascent_lambda(lam, Hj, 1.0 / np.sqrt(k + 1))
        np.testing.assert_allclose(lam, [0, 1, 0, 0], atol=1e-12)

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=10), st.floats(0, 100))
    def test_stays_on_simplex(self, H, s):
        lam = np.full(len(H), 1 / len(H))
        assert check_simplex(ascent_lambda(lam, np.array(H), s))

    def test_negative_step(self):
        with pytest.raises(ParameterError):
            ascent_lambda([1.0], [1.0], -0.1)


class TestStationarityProxy:
    def test_constant_iterates(self):
        tr = BilevelTrace(grad_norm=[0.0] * 5)
        assert stationarity_proxy(tr, 3) == 0.0

    def test_positive_when_moving(self):
        assert stationarity_proxy([0.3, 0.2, 0.5], 2) > 0

    def test_window_too_long(self):
        with pytest.raises(ParameterError):
            stationarity_proxy([0.1], 2)


def t1_config(K=5, strategies=None, seed=0, n=20, **kw):
    data = gen_t1(seed, n_queries=n, test_size=2000)
    base = dict(inner=LowerLevelProblem(solver="newton", tol=1e-8), n_queries=n, K=K, r0=10.0, s0=1.0,
                minibatch=200, stop_rtol=None, x0=data.x0, seed=seed)
    base.update(kw)
    return BilevelConfig(data.server, strategies or data.strategies[40:44], data.test_X, data.test_y, **base)


class TestRun:
    def test_k_zero_returns_init(self):
        cfg = t1_config(K=0)
        res = run(cfg)
        np.testing.assert_array_equal(res.x_bar, cfg.x0)
        np.testing.assert_array_equal(res.x_last, cfg.x0)
        np.testing.assert_array_equal(res.lam, np.full(4, 0.25))
        assert len(res.trace) == 0

    def test_invariants_every_step(self):
        res = run(t1_config(K=15, box=(-3.0, 3.0)))
        for lam in res.trace.lam + [res.lam]:
            assert check_simplex(lam, 1e-12)
        for x in res.iterates:
            assert np.all(np.abs(x) <= 3.0)

    def test_replay_bit_exact(self):
        a, b = run(t1_config(K=8)), run(t1_config(K=8))
        np.testing.assert_array_equal(a.x_last, b.x_last)
        np.testing.assert_array_equal(a.lam, b.lam)
        assert a.trace.H == b.trace.H and a.xbar_index == b.xbar_index

    def test_batched_matches_generic(self):
        a = run(t1_config(K=4, batched=True))
        b = run(t1_config(K=4, batched=False))
        np.testing.assert_allclose(a.x_last, b.x_last, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(a.lam, b.lam, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(a.trace.H, b.trace.H, rtol=1e-6)

    def test_realizable_identity(self):
        cfg = t1_config(K=30, strategies=[Identity()], r0=1.0)
        res = run(cfg)
        ce_true = float(np.mean(loss_value("xent", SERVER.raw(cfg.test_X), (cfg.test_y + 1) / 2)))
        assert res.trace.H[-1] <= ce_true + 0.01

    def test_toy_converges_to_known_minimiser(self):
        # one query, f_S(x) = x + 1, one test point: H(x) has its unique minimum at 1 - sqrt(3)
        server = linear_model([1.0], 1.0)
        cfg = BilevelConfig(server, [Identity()], np.array([[2.0]]), np.array([-1.0]),
                            inner=LowerLevelProblem("linear", "squared", ridge=1.0, tol=1e-10, solver="newton"),
                            n_queries=1, K=400, r0=0.1, s0=0.0, schedule="constant", neumann_steps=500,
                            minibatch=1, stop_rtol=None, upper_loss="squared", x0=np.array([[0.0]]))
        res = run(cfg)
        assert abs(res.x_last[0, 0] - (1 - np.sqrt(3))) <= 1e-3
        assert stationarity_proxy(res.trace, 10) <= 1e-4

    def test_early_stop(self):
        res = run(t1_config(K=200, stop_rtol=1e-3, stop_window=5, r0=0.0))
        assert res.stopped_early and len(res.trace) < 200

    def test_rejects_randomised_strategies(self):
        with pytest.raises(ParameterError):
            t1_config(strategies=[UniformFlip(0.1)])

    def test_bad_x0_shape(self):
        with pytest.raises(DimensionError):
            run(t1_config(x0=np.zeros((3, 2))))

    def test_artifact(self, tmp_path):
        res = run(t1_config(K=4, checkpoint_every=2))
        h = write_run_artifact(res, tmp_path, {"k": 4})
        assert len(h) == 64
        header = (tmp_path / "trace.csv").read_text().splitlines()[0].split(",")
        assert header[:3] == ["k", "H", "phi"] and header[-1] == "lam_4"
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["k00002.json", "k00004.json"]
        assert (tmp_path / "queries_bar.csv").exists() and (tmp_path / "lambda.json").exists()


def test_rng_paths_unique():
    assert make_rng(0, "init").random() != make_rng(0, "minibatch").random()
