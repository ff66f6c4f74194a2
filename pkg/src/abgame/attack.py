"""The adversary: query initialisation and regularised risk minimisation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .batch import LabeledBatch
from .errors import DimensionError, DivergenceError, ParameterError
from .models import (
    KINDS,
    TRAIN_LOSSES,
    Model,
    grad_beta,
    hessian_beta,
    init_model,
    objective,
    param_count,
)
from .numeric import as_finite, make_rng

__all__ = [
    "LabeledBatch",
    "LowerLevelProblem",
    "InnerTrace",
    "init_queries",
    "fit_lower",
    "solve_inner",
    "extract",
    "NearestNeighbor",
    "HalfplaneERM",
]

SOLVERS = ("gd", "newton", "lbfgs", "sgd")
ROUNDOFF = 64 * np.finfo(np.float64).eps
NEWTON_MAX_PARAMS = 400


@dataclass(frozen=True)
class LowerLevelProblem:
    """The adversary's fitting problem: model class, loss, ridge and solver knobs."""

    kind: str = "logistic"
    loss: str = "xent"
    ridge: float = 1e-2
    tol: float = 1e-6
    max_iter: int = 5000
    solver: str = "gd"
    step0: float = 1.0
    backtrack: bool = True
    batch_size: int | None = None
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.loss not in TRAIN_LOSSES:
            raise ParameterError(f"unknown training loss {self.loss!r}")
        if not self.ridge > 0:
            raise ParameterError("ridge coefficient must be positive (strong convexity)")
        if not self.tol > 0:
            raise ParameterError("inner tolerance must be positive")
        if self.max_iter < 1:
            raise ParameterError("max_iter must be at least 1")
        if self.solver not in SOLVERS:
            raise ParameterError(f"unknown solver {self.solver!r}; choose from {SOLVERS}")
        if not self.step0 > 0:
            raise ParameterError("step0 must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        if self.kind == "mlp2" and self.hidden < 1:
            raise ParameterError("mlp2 needs hidden >= 1")

    @property
    def model_hidden(self) -> int:
        return self.hidden if self.kind == "mlp2" else 0

    def n_params(self, dim: int) -> int:
        return param_count(self.kind, dim, self.model_hidden)

    def template(self, dim: int, beta=None) -> Model:
        if beta is None:
            beta = np.zeros(self.n_params(dim))
        return Model(self.kind, dim, beta, self.model_hidden)

    def targets(self, batch: LabeledBatch) -> np.ndarray:
        """Batch labels on the scale the training loss expects."""
        if self.loss == "xent":
            return batch.targets01()
        return batch.y.astype(np.float64)


@dataclass
class InnerTrace:
    grad_norms: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    converged: bool = False
    hit_max_iter: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.grad_norms) - 1, 0)


def init_queries(n: int, d: int, scheme: str = "gaussian", rng: np.random.Generator | None = None,
                 lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Initial query matrix (n, d) from N(0, I) or uniform on [lo, hi]^d."""
    if n < 1 or d < 1:
        raise DimensionError("need n >= 1 and d >= 1")
    if rng is None:
        rng = make_rng(0, "queries")
    if scheme == "gaussian":
        return rng.standard_normal((n, d))
    if scheme == "uniform":
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ParameterError(f"uniform bounds need lo < hi, got [{lo}, {hi}]")
        return rng.uniform(lo, hi, size=(n, d))
    raise ParameterError(f"unknown query scheme {scheme!r}")


# --------------------------------------------------------------------------
# inner solvers
# --------------------------------------------------------------------------

def _check_growth(norms, objectives, window=100, factor=10.0):
    # a growing gradient while the objective still falls is rounding noise at the optimum
    if len(norms) <= window or not norms[-1] > factor * norms[-1 - window]:
        return
    f_new, f_old = objectives[-1], objectives[-1 - window]
    if not np.isfinite(f_new) or f_new > f_old + ROUNDOFF * abs(f_old):
        raise DivergenceError(
            f"inner gradient norm grew {norms[-1] / norms[-1 - window]:.1f}x over {window} "
            "iterations; use a smaller stepsize or enable backtracking"
        )


def _gd(problem, model, X, t, tr):
    mu = problem.ridge
    beta = model.beta.copy()
    f = objective(model, X, problem.loss, t, mu)
    g = grad_beta(model, X, problem.loss, t, mu)
    step = problem.step0
    tr.objectives.append(f)
    tr.grad_norms.append(float(np.linalg.norm(g)))
    for _ in range(problem.max_iter):
        if tr.grad_norms[-1] <= problem.tol:
            tr.converged = True
            return beta
        if problem.backtrack:
            # Armijo; restart from a slightly larger step than last accepted
            step *= 2.0
            gg = g @ g
            while True:
                cand = beta - step * g
                fc = objective(model.with_beta(cand), X, problem.loss, t, mu)
                if np.isfinite(fc) and fc <= f - 0.5 * step * gg:
                    break
                if abs(fc - f) <= ROUNDOFF * abs(f):
                    # f no longer resolves the decrease; judge the step by the gradient instead
                    gc = grad_beta(model.with_beta(cand), X, problem.loss, t, mu)
                    if gc @ gc < gg:
                        break
                step *= 0.5
                if step < 1e-20:
                    # no decrease possible at float precision
                    tr.converged = tr.grad_norms[-1] <= problem.tol
                    return beta
        else:
            cand = beta - step * g
            fc = objective(model.with_beta(cand), X, problem.loss, t, mu) if np.all(np.isfinite(cand)) else np.inf
        beta, f = cand, fc
        g = grad_beta(model.with_beta(beta), X, problem.loss, t, mu)
        tr.objectives.append(float(f))
        tr.grad_norms.append(float(np.linalg.norm(g)))
        if not np.isfinite(tr.grad_norms[-1]) or not np.isfinite(f):
            raise DivergenceError("inner objective became non-finite; use a smaller stepsize")
        _check_growth(tr.grad_norms, tr.objectives)
    tr.converged = tr.grad_norms[-1] <= problem.tol
    tr.hit_max_iter = not tr.converged
    return beta


def _newton(problem, model, X, t, tr):
    if model.n_params > NEWTON_MAX_PARAMS:
        raise ParameterError(
            f"newton solver builds a dense Hessian; {model.n_params} parameters is too many, use 'lbfgs'"
        )
    mu = problem.ridge
    beta = model.beta.copy()
    f = objective(model, X, problem.loss, t, mu)
    g = grad_beta(model, X, problem.loss, t, mu)
    tr.objectives.append(f)
    tr.grad_norms.append(float(np.linalg.norm(g)))
    for _ in range(problem.max_iter):
        if tr.grad_norms[-1] <= problem.tol:
            tr.converged = True
            return beta
        H = hessian_beta(model.with_beta(beta), X, problem.loss, t, mu)
        try:
            d = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            d = -g
        if not g @ d < 0:
            d = -g  # indefinite Hessian (mlp2): fall back to steepest descent
        step = 1.0
        while True:
            cand = beta + step * d
            fc = objective(model.with_beta(cand), X, problem.loss, t, mu)
            # the slack absorbs rounding in f once Newton is at machine-precision scale
            if np.isfinite(fc) and fc <= f + 1e-4 * step * (g @ d) + ROUNDOFF * abs(f):
                break
            step *= 0.5
            if step < 1e-20:
                tr.converged = tr.grad_norms[-1] <= problem.tol
                return beta
        beta, f = cand, fc
        g = grad_beta(model.with_beta(beta), X, problem.loss, t, mu)
        tr.objectives.append(float(f))
        tr.grad_norms.append(float(np.linalg.norm(g)))
    tr.converged = tr.grad_norms[-1] <= problem.tol
    tr.hit_max_iter = not tr.converged
    return beta


def _lbfgs(problem, model, X, t, tr):
    mu = problem.ridge

    def fg(b):
        m = model.with_beta(b)
        return objective(m, X, problem.loss, t, mu), grad_beta(m, X, problem.loss, t, mu)

    f0, g0 = fg(model.beta)
    tr.objectives.append(f0)
    tr.grad_norms.append(float(np.linalg.norm(g0)))

    def record(xk):
        f, g = fg(xk)
        tr.objectives.append(float(f))
        tr.grad_norms.append(float(np.linalg.norm(g)))

    res = minimize(fg, model.beta.copy(), jac=True, method="L-BFGS-B", callback=record,
                   options={"maxiter": problem.max_iter, "gtol": problem.tol / np.sqrt(model.n_params),
                            "ftol": 0.0, "maxcor": 20})
    beta = res.x
    f, g = fg(beta)
    if not tr.objectives or tr.objectives[-1] != f:
        tr.objectives.append(float(f))
        tr.grad_norms.append(float(np.linalg.norm(g)))
    tr.converged = tr.grad_norms[-1] <= problem.tol
    tr.hit_max_iter = not tr.converged
    return beta


def _sgd(problem, model, X, t, tr, rng):
    mu = problem.ridge
    n = X.shape[0]
    b = min(problem.batch_size or n, n)
    beta = model.beta.copy()

    def full(bb):
        m = model.with_beta(bb)
        return objective(m, X, problem.loss, t, mu), grad_beta(m, X, problem.loss, t, mu)

    f, g = full(beta)
    tr.objectives.append(f)
    tr.grad_norms.append(float(np.linalg.norm(g)))
    for k in range(problem.max_iter):
        if tr.grad_norms[-1] <= problem.tol:
            tr.converged = True
            return beta
        idx = rng.integers(0, n, size=b)
        # rescale so the minibatch gradient is unbiased for the full sum
        gb = grad_beta(model.with_beta(beta), X[idx], problem.loss, t[idx], 0.0) * (n / b) + 2.0 * mu * beta
        beta = beta - problem.step0 / np.sqrt(k + 1.0) * gb / n
        if (k + 1) % 10 == 0 or k + 1 == problem.max_iter:
            f, g = full(beta)
            tr.objectives.append(float(f))
            tr.grad_norms.append(float(np.linalg.norm(g)))
            if not np.isfinite(f):
                raise DivergenceError("inner objective became non-finite; use a smaller stepsize")
            _check_growth(tr.grad_norms, tr.objectives, window=10)
    tr.converged = tr.grad_norms[-1] <= problem.tol
    tr.hit_max_iter = not tr.converged
    return beta


def solve_inner(problem: LowerLevelProblem, X, targets, beta0=None, rng=None) -> tuple[np.ndarray, InnerTrace]:
    """Minimise sum_i loss(f(x_i; beta), t_i) + ridge*||beta||^2 from beta0.

    ``targets`` are already on the loss's scale ([0, 1] for xent).  The
    returned trace holds the full-gradient norm per iteration; if the
    tolerance was not met ``trace.hit_max_iter`` is set.
    """
    X = as_finite(X, "X", ndim=2)
    t = as_finite(targets, "targets", ndim=1)
    if X.shape[0] < 1:
        raise DimensionError("empty batch")
    if t.size != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} points but {t.size} targets")
    if rng is None:
        rng = make_rng(0, "inner")
    if beta0 is None:
        model = init_model(problem.kind, X.shape[1], rng, problem.hidden)
    else:
        model = problem.template(X.shape[1], beta0)
    tr = InnerTrace()
    if problem.solver == "gd":
        beta = _gd(problem, model, X, t, tr)
    elif problem.solver == "newton":
        beta = _newton(problem, model, X, t, tr)
    elif problem.solver == "lbfgs":
        beta = _lbfgs(problem, model, X, t, tr)
    else:
        beta = _sgd(problem, model, X, t, tr, rng)
    return np.asarray(beta, dtype=np.float64), tr


def fit_lower(problem: LowerLevelProblem, batch: LabeledBatch, beta0=None, rng=None) -> tuple[np.ndarray, InnerTrace]:
    """Fit the adversary's model to a labeled batch; returns (beta*, trace)."""
    return solve_inner(problem, batch.X, problem.targets(batch), beta0, rng)


def extract(oracle, queries, problem: LowerLevelProblem, beta0=None, rng=None) -> Model:
    """Query the oracle, fit the adversary and return the extracted model."""
    Q = as_finite(queries, "queries", ndim=2)
    if Q.shape[1] != oracle.server.dim:
        raise DimensionError(f"queries have dimension {Q.shape[1]}, server expects {oracle.server.dim}")
    batch = oracle.respond(Q)
    beta, _ = fit_lower(problem, batch, beta0, rng)
    return problem.template(Q.shape[1], beta)


class NearestNeighbor:
    """Interpolating risk minimiser: predicts the label of the nearest query.

    Zero empirical 0-1 risk on any batch, so its errors track the label noise
    the defense injected.  Call with a hard-labeled batch to get a fitted
    model exposing ``hard(X)``.
    """

    def __call__(self, batch: LabeledBatch, rng=None):
        from sklearn.neighbors import KNeighborsClassifier

        if batch.mode != "hard":
            raise ParameterError("nearest-neighbour adversary needs hard labels")
        clf = KNeighborsClassifier(n_neighbors=1, algorithm="kd_tree").fit(batch.X, batch.y.astype(np.int64))
        return _FittedNN(clf, batch.X.shape[1])


@dataclass(frozen=True, eq=False)
class _FittedNN:
    clf: object
    dim: int

    def hard(self, X) -> np.ndarray:
        return self.clf.predict(np.atleast_2d(as_finite(X, "X")))


class HalfplaneERM:
    """Empirical 0-1 risk minimiser over affine halfplanes in two dimensions.

    For each direction on an angle grid the best threshold is found exactly
    by a sorted scan; the grid is then refined around the best angle.
    """

    def __init__(self, coarse: int = 720, fine: int = 1001):
        if coarse < 4 or fine < 3:
            raise ParameterError("angle grids too small")
        self.coarse = coarse
        self.fine = fine

    @staticmethod
    def _best(P, y):
        # P (k, n) projections for k angles; returns (errors, threshold index) per angle
        order = np.argsort(P, axis=1, kind="stable")
        ys = y[order]
        pos_below = np.concatenate([np.zeros((P.shape[0], 1)), np.cumsum(ys == 1, axis=1)], axis=1)
        neg = (ys == -1)[:, ::-1]
        neg_above = np.concatenate([np.zeros((P.shape[0], 1)), np.cumsum(neg, axis=1)], axis=1)[:, ::-1]
        err = pos_below + neg_above
        k = np.argmin(err, axis=1)
        return err[np.arange(P.shape[0]), k], k, np.take_along_axis(P, order, axis=1)

    def _scan(self, X, y, thetas):
        U = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
        err, k, Ps = self._best(U @ X.T, y)
        ties = np.flatnonzero(err == err.min())
        i = int(ties[len(ties) // 2])  # middle of the tied angles, a margin-like choice
        n = X.shape[0]
        ps = Ps[i]
        if k[i] == 0:
            thr = ps[0] - 1.0
        elif k[i] == n:
            thr = ps[-1] + 1.0
        else:
            thr = 0.5 * (ps[k[i] - 1] + ps[k[i]])
        return err[i], thetas[i], thr

    def __call__(self, batch: LabeledBatch, rng=None):
        if batch.mode != "hard":
            raise ParameterError("0-1 risk minimisation needs hard labels")
        X, y = batch.X, batch.y
        if X.shape[1] != 2:
            raise DimensionError("HalfplaneERM works in two dimensions")
        step = 2 * np.pi / self.coarse
        _, th, _ = self._scan(X, y, np.arange(self.coarse) * step)
        _, th, thr = self._scan(X, y, np.linspace(th - step, th + step, self.fine))
        return Model("linear", 2, np.array([np.cos(th), np.sin(th), -thr]))
