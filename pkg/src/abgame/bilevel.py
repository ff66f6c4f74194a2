"""Min-max bilevel query optimisation by stochastic gradient descent-ascent.

The server picks a mixture ``lam`` over defense strategies to maximise the
adversary's test loss; the adversary moves its queries ``x`` to minimise it,
with one regularised fit ``beta_j*(x)`` per strategy.  Gradients with respect
to ``x`` go through the implicit function theorem:

    dH_j/dx = -(d^2 h_j / dx dbeta) [d^2 h_j / dbeta^2]^{-1} dH_j/dbeta

with the inverse applied by a truncated Neumann series.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import ROUNDOFF, LowerLevelProblem, solve_inner
from .defense import defended_score, defended_score_grad
from .errors import DimensionError, DivergenceError, ParameterError
from .io import atomic_write_csv, atomic_write_json, config_hash, fmt
from .models import (
    Model,
    cross_hvp_xbeta,
    grad_beta,
    hvp_beta,
    loss_d1,
    loss_d2,
    loss_dt,
    loss_value,
)
from .numeric import (
    as_finite,
    check_simplex,
    default_neumann_scale,
    make_rng,
    neumann_inverse_apply,
    project_box,
    project_simplex,
    sigmoid,
)


class InnerSolveError(DivergenceError):
    """The lower-level solve missed its tolerance before an outer step."""


class BilevelAbort(DivergenceError):
    """Non-finite objective; ``trace`` holds everything recorded so far."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(eq=False)
class BilevelConfig:
    server: Model
    strategies: list
    test_X: np.ndarray
    test_y: np.ndarray
    inner: LowerLevelProblem = field(default_factory=lambda: LowerLevelProblem(solver="newton"))
    n_queries: int = 200
    K: int = 100
    r0: float = 0.1
    s0: float = 1.0
    schedule: str = "diminishing"
    neumann_steps: int = 50
    neumann_scale: float | None = None
    minibatch: int = 1000
    inner_steps: int | None = None
    stop_window: int = 10
    stop_rtol: float | None = 1e-3
    box: tuple = (-10.0, 10.0)
    init: str = "gaussian"
    init_box: tuple | None = None
    x0: np.ndarray | None = None
    seed: int = 0
    upper_loss: str = "xent"
    trace_size: int | None = None
    checkpoint_every: int = 0
    batched: bool | None = None

    def __post_init__(self):
        if self.K < 0:
            raise ParameterError("K must be non-negative")
        if not self.strategies:
            raise ParameterError("need at least one defense strategy")
        if not (self.r0 >= 0 and self.s0 >= 0):
            raise ParameterError("stepsizes must be non-negative")
        if self.schedule not in ("diminishing", "constant"):
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        if self.neumann_steps < 1:
            raise ParameterError("neumann_steps must be at least 1")
        if self.neumann_scale is not None and not self.neumann_scale > 0:
            raise ParameterError("neumann_scale must be positive")
        if self.minibatch < 1:
            raise ParameterError("minibatch must be positive")
        if self.inner_steps is not None and self.inner_steps < 1:
            raise ParameterError("inner_steps must be positive")
        if self.stop_window < 1:
            raise ParameterError("stop_window must be positive")
        lo, hi = self.box
        if not lo < hi:
            raise ParameterError("box needs lo < hi")
        self.test_X = as_finite(self.test_X, "test_X", ndim=2)
        self.test_y = as_finite(self.test_y, "test_y", ndim=1)
        if self.test_X.shape[0] == 0:
            raise DimensionError("empty test set")
        if self.test_y.size != self.test_X.shape[0]:
            raise DimensionError("test_X and test_y lengths differ")
        if self.test_X.shape[1] != self.server.dim:
            raise DimensionError("test points and server dimension differ")
        if any(getattr(g, "randomized", False) for g in self.strategies):
            raise ParameterError("bilevel optimisation needs deterministic (differentiable) strategies")

    @property
    def m(self) -> int:
        return len(self.strategies)

    def stepsizes(self, k: int) -> tuple:
        if self.schedule == "constant":
            return self.r0, self.s0
        c = 1.0 / np.sqrt(k + 1.0)
        return self.r0 * c, self.s0 * c


@dataclass
class BilevelTrace:
    """Row k describes (x^k, lam^k) before the k-th update."""

    H: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    H_j: list = field(default_factory=list)
    h_j: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    inner_ok: list = field(default_factory=list)

    def __len__(self):
        return len(self.H)


@dataclass
class GameState:
    x: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    k: int = 0


@dataclass
class BilevelResult:
    x_bar: np.ndarray
    x_last: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    trace: BilevelTrace
    iterates: list
    checkpoints: list
    xbar_index: int
    stopped_early: bool


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _targets01(y):
    y = np.asarray(y, dtype=np.float64)
    return (y + 1.0) / 2.0 if np.any(y < 0) else y


def lower_targets(server, strategy, X, loss: str):
    """Defended responses on the training loss's scale and their x-gradients.

    Cross-entropy regresses sigmoid(f^g); squared loss regresses f^g itself.
    """
    s = defended_score(server, strategy, X)
    ds = defended_score_grad(server, strategy, X)
    if loss == "xent":
        q = sigmoid(s)
        return q, (q * (1.0 - q))[:, None] * ds
    return s, ds


def upper_objective(models, lam, test_X, test_y, loss: str = "xent") -> tuple:
    """(1/m) sum_j lam_j H_j with H_j the mean test loss of adversary j.

    Returns ``(H, H_j)``.  The 1/m factor is kept alongside the simplex
    weights, so uniform lam gives total weight 1/m.
    """
    T = as_finite(test_X, "test_X", ndim=2)
    if T.shape[0] == 0:
        raise DimensionError("empty test set")
    t = _targets01(test_y) if loss == "xent" else np.asarray(test_y, dtype=np.float64)
    lam = as_finite(lam, "lam", ndim=1)
    if lam.size != len(models):
        raise DimensionError(f"{len(models)} models but {lam.size} weights")
    Hj = np.array([np.mean(loss_value(loss, mdl.raw(T), t)) for mdl in models])
    return float(Hj @ lam / len(models)), Hj


def hypergrad_x(model: Model, X, inner: LowerLevelProblem, targets, target_grad, test_X, test_y,
                steps: int = 50, scale: float | None = None, upper_loss: str = "xent") -> np.ndarray:
    """Implicit hypergradient of the mean test loss of ``model`` w.r.t. the queries, shape (n, d).

    ``model`` must hold the lower-level solution for ``X``; ``targets`` and
    ``target_grad`` are the defended responses and their x-derivatives.
    """
    T = as_finite(test_X, "test_X", ndim=2)
    t = _targets01(test_y) if upper_loss == "xent" else np.asarray(test_y, dtype=np.float64)
    g = grad_beta(model, T, upper_loss, t) / T.shape[0]

    def hvp(v):
        return hvp_beta(model, X, inner.loss, targets, v, inner.ridge)

    if scale is None:
        scale = default_neumann_scale(hvp, model.n_params)
    u = neumann_inverse_apply(hvp, g, steps, scale)
    return -cross_hvp_xbeta(model, X, inner.loss, targets, u, target_grad)


def ascent_lambda(lam, H_j, s_k: float) -> np.ndarray:
    """Projected ascent step on the simplex; the gradient entry j is H_j / m."""
    lam = as_finite(lam, "lam", ndim=1)
    H_j = as_finite(H_j, "H_j", ndim=1)
    if lam.size != H_j.size:
        raise DimensionError("lam and H_j lengths differ")
    if s_k < 0:
        raise ParameterError("ascent stepsize must be non-negative")
    if s_k == 0:
        return lam.copy()
    return project_simplex(lam + s_k * H_j / lam.size)


def stationarity_proxy(trace: BilevelTrace, window: int) -> float:
    """Mean projected-gradient residual over the last ``window`` iterations."""
    g = trace.grad_norm if isinstance(trace, BilevelTrace) else list(trace)
    if window < 1:
        raise ParameterError("window must be positive")
    if window > len(g):
        raise ParameterError(f"window {window} exceeds trace length {len(g)}")
    return float(np.mean(g[-window:]))


def _residual(x, g, r, lo, hi) -> float:
    if r <= 0:
        return 0.0
    return float(np.linalg.norm(x - np.clip(x - r * g, lo, hi)) / r)


# --------------------------------------------------------------------------
# batched kernels for linear/logistic adversaries
# --------------------------------------------------------------------------

def _aug(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _batched_newton(B, Xb, Q, inner: LowerLevelProblem, max_iter: int):
    """Damped Newton on every strategy's fit at once.  B (J, P), Q (J, n)."""
    mu, loss = inner.ridge, inner.loss
    eye = np.eye(B.shape[1])

    def obj(Bc):
        R = Bc @ Xb.T
        return np.sum(loss_value(loss, R, Q), axis=1) + mu * np.sum(Bc * Bc, axis=1)

    it = 0
    for it in range(max_iter + 1):
        R = B @ Xb.T
        G = loss_d1(loss, R, Q) @ Xb + 2.0 * mu * B
        gn = np.linalg.norm(G, axis=1)
        if gn.max() <= inner.tol or it == max_iter:
            break
        W = loss_d2(loss, R, Q)
        Hs = np.einsum("jn,na,nb->jab", W, Xb, Xb) + 2.0 * mu * eye
        D = np.linalg.solve(Hs, G[..., None])[..., 0]
        active = gn > inner.tol
        D[~active] = 0.0
        f0 = obj(B)
        dec = np.sum(G * D, axis=1)
        step = np.ones(B.shape[0])
        while True:
            Bn = B - step[:, None] * D
            f1 = obj(Bn)
            bad = (f1 > f0 - 1e-4 * step * dec + ROUNDOFF * np.abs(f0)) & active
            if not bad.any() or step.min() < 1e-12:
                break
            step[bad] *= 0.5
        B = Bn
    return B, gn, it


def _batched_hypergrad(B, X, Q, dQ, T, t_up, inner: LowerLevelProblem, cfg: BilevelConfig):
    """Per-strategy implicit hypergradients, shape (J, n, d)."""
    d = X.shape[1]
    Xb, Tb = _aug(X), _aug(T)
    RT = B @ Tb.T
    gB = loss_d1(cfg.upper_loss, RT, t_up) @ Tb / T.shape[0]
    R = B @ Xb.T
    d1 = loss_d1(inner.loss, R, Q)
    d2 = loss_d2(inner.loss, R, Q)
    Hs = np.einsum("jn,na,nb->jab", d2, Xb, Xb) + 2.0 * inner.ridge * np.eye(B.shape[1])
    if cfg.neumann_scale is None:
        alpha = 1.0 / np.trace(Hs, axis1=1, axis2=2)
    else:
        alpha = np.full(B.shape[0], cfg.neumann_scale)
    term = gB.copy()
    acc = gB.copy()
    for _ in range(cfg.neumann_steps - 1):
        term = term - alpha[:, None] * np.einsum("jab,jb->ja", Hs, term)
        acc += term
    U = alpha[:, None] * acc
    if not np.all(np.isfinite(U)):
        raise DivergenceError("Neumann series diverged; use a smaller neumann_scale")
    XU = U @ Xb.T                                    # J_i u for every (j, i)
    cross = (d2 * XU)[:, :, None] * B[:, None, :d] + d1[:, :, None] * U[:, None, :d]
    cross += (loss_dt(inner.loss) * XU)[:, :, None] * dQ
    return -cross


# --------------------------------------------------------------------------
# the solver
# --------------------------------------------------------------------------

def _initial_queries(cfg: BilevelConfig, rng):
    d = cfg.server.dim
    lo, hi = cfg.box
    if cfg.x0 is not None:
        x = as_finite(cfg.x0, "x0", ndim=2)
        if x.shape != (cfg.n_queries, d):
            raise DimensionError(f"x0 must have shape {(cfg.n_queries, d)}")
        return project_box(x, lo, hi)
    if cfg.init == "gaussian":
        x = rng.standard_normal((cfg.n_queries, d))
    elif cfg.init == "uniform":
        a, b = cfg.init_box or cfg.box
        x = rng.uniform(a, b, size=(cfg.n_queries, d))
    else:
        raise ParameterError(f"unknown init {cfg.init!r}")
    return project_box(x, lo, hi)


def _use_batched(cfg: BilevelConfig) -> bool:
    ok = cfg.inner.kind in ("linear", "logistic") and cfg.inner.solver == "newton"
    if cfg.batched is None:
        return ok
    if cfg.batched and not ok:
        raise ParameterError("the batched path needs a linear/logistic adversary with the newton solver")
    return cfg.batched


def run(cfg: BilevelConfig) -> BilevelResult:
    """Alternate inner fits, lam ascent and x descent for ``cfg.K`` outer steps.

    Inner fits are warm-started from the previous outer step.  The returned
    ``x_bar`` is drawn uniformly from the iterates x^1..x^K (x^0 when K = 0).
    """
    inner = cfg.inner
    J, d = cfg.m, cfg.server.dim
    lo, hi = cfg.box
    rng_init = make_rng(cfg.seed, "init")
    rng_mb = make_rng(cfg.seed, "minibatch")
    rng_bar = make_rng(cfg.seed, "xbar")
    batched = _use_batched(cfg)

    x = _initial_queries(cfg, rng_init)
    P = inner.n_params(d)
    if inner.kind == "mlp2":
        B = rng_init.standard_normal((J, P))
    else:
        B = np.zeros((J, P))
    lam = np.full(J, 1.0 / J)
    T_all = cfg.test_X
    t_all = _targets01(cfg.test_y) if cfg.upper_loss == "xent" else cfg.test_y
    if cfg.trace_size is None or cfg.trace_size >= T_all.shape[0]:
        T_tr, t_tr = T_all, t_all
    else:
        T_tr, t_tr = T_all[: cfg.trace_size], t_all[: cfg.trace_size]
    trace = BilevelTrace()
    iterates = [x.copy()]
    checkpoints = []

    def targets(xx):
        Q = np.empty((J, xx.shape[0]))
        dQ = np.empty((J,) + xx.shape)
        for j, g in enumerate(cfg.strategies):
            Q[j], dQ[j] = lower_targets(cfg.server, g, xx, inner.loss)
        return Q, dQ

    def solve(xx, Bw, Q, first):
        limit = inner.max_iter if (first or cfg.inner_steps is None) else cfg.inner_steps
        if batched:
            Bn, gn, its = _batched_newton(Bw, _aug(xx), Q, inner, limit)
            return Bn, int(its), bool(gn.max() <= inner.tol), gn
        prob = LowerLevelProblem(**{**inner.__dict__, "max_iter": limit})
        out = np.empty_like(Bw)
        its, ok, gns = 0, True, np.empty(J)
        for j in range(J):
            out[j], tr = solve_inner(prob, xx, Q[j], Bw[j], make_rng(cfg.seed, "inner", j))
            its = max(its, tr.iterations)
            ok &= tr.converged
            gns[j] = tr.grad_norms[-1]
        return out, its, ok, gns

    def models(Bw):
        return [inner.template(d, b) for b in Bw]

    Q, dQ = targets(x)
    B, its, ok, gn = solve(x, B, Q, True)
    if not ok:
        raise InnerSolveError(f"initial inner solve missed tolerance {inner.tol:g} (max grad {gn.max():.3g})")

    stopped = False
    for k in range(cfg.K):
        r_k, s_k = cfg.stepsizes(k)
        if cfg.inner_steps is None and not ok:
            raise InnerSolveError(
                f"outer step {k}: inner solve missed tolerance {inner.tol:g} (max grad {gn.max():.3g})"
            )
        # objective bookkeeping at (x^k, lam^k)
        H, Hj = upper_objective(models(B), lam, T_tr, t_tr, cfg.upper_loss)
        hj = np.array([
            float(np.sum(loss_value(inner.loss, mdl.raw(x), Q[j])) + inner.ridge * B[j] @ B[j])
            for j, mdl in enumerate(models(B))
        ])
        if not (np.isfinite(H) and np.all(np.isfinite(hj))):
            raise BilevelAbort(f"non-finite objective at outer step {k}", trace)

        # x descent with a minibatch hypergradient
        idx = rng_mb.integers(0, T_all.shape[0], size=cfg.minibatch)
        Tm, tm = T_all[idx], t_all[idx]
        if batched:
            G = _batched_hypergrad(B, x, Q, dQ, Tm, tm, inner, cfg)
        else:
            G = np.stack([
                hypergrad_x(mdl, x, inner, Q[j], dQ[j], Tm, tm, cfg.neumann_steps, cfg.neumann_scale, cfg.upper_loss)
                for j, mdl in enumerate(models(B))
            ])
        gx = np.einsum("j,jnd->nd", lam, G) / J
        if not np.all(np.isfinite(gx)):
            raise BilevelAbort(f"non-finite hypergradient at outer step {k}", trace)

        trace.H.append(H)
        trace.phi.append(float(Hj.max() / J))
        trace.H_j.append(Hj)
        trace.h_j.append(hj)
        trace.grad_norm.append(_residual(x, gx, r_k, lo, hi))
        trace.lam.append(lam.copy())
        trace.inner_iters.append(its)
        trace.inner_ok.append(ok)

        x = project_box(x - r_k * gx, lo, hi)

        # re-solve at x^{k+1}; lam ascends on the minibatch estimate there
        Q, dQ = targets(x)
        B, its, ok, gn = solve(x, B, Q, False)
        _, Hm = upper_objective(models(B), lam, Tm, tm, cfg.upper_loss)
        lam = ascent_lambda(lam, Hm, s_k)

        assert check_simplex(lam, 1e-9), "lam left the simplex"
        assert np.all((x >= lo) & (x <= hi)), "queries left the box"
        iterates.append(x.copy())
        if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            checkpoints.append({"k": k + 1, "x": x.copy(), "lam": lam.copy(), "beta": B.copy()})

        if cfg.stop_rtol is not None and len(trace.phi) >= 2 * cfg.stop_window:
            w = cfg.stop_window
            prev = np.mean(trace.phi[-2 * w:-w])
            cur = np.mean(trace.phi[-w:])
            if prev > 0 and (prev - cur) / abs(prev) < cfg.stop_rtol:
                stopped = True
                break

    if len(iterates) == 1:
        pick = 0
    else:
        pick = int(rng_bar.integers(1, len(iterates)))
    return BilevelResult(
        x_bar=iterates[pick].copy(),
        x_last=x.copy(),
        lam=lam,
        beta=B,
        trace=trace,
        iterates=iterates,
        checkpoints=checkpoints,
        xbar_index=pick,
        stopped_early=stopped,
    )


# --------------------------------------------------------------------------
# run artifacts
# --------------------------------------------------------------------------

def write_run_artifact(result: BilevelResult, out_dir, config: dict) -> str:
    """Config snapshot + hash, trace CSV, final queries, lam and checkpoints.

    Returns the config hash.
    """
    from pathlib import Path

    out = Path(out_dir)
    h = config_hash(config)
    atomic_write_json(out / "config.json", {"config": config, "config_hash": h})
    tr = result.trace
    m = result.lam.size
    header = ["k", "H", "phi"] + [f"h_{j + 1}" for j in range(m)] + ["grad_norm"] + [f"lam_{j + 1}" for j in range(m)]
    rows = []
    for k in range(len(tr)):
        rows.append([k, fmt(tr.H[k]), fmt(tr.phi[k])] + [fmt(v) for v in tr.h_j[k]]
                    + [fmt(tr.grad_norm[k])] + [fmt(v) for v in tr.lam[k]])
    atomic_write_csv(out / "trace.csv", header, rows)
    d = result.x_last.shape[1]
    atomic_write_csv(out / "queries_last.csv", [f"x{i + 1}" for i in range(d)],
                     [[fmt(v) for v in row] for row in result.x_last])
    atomic_write_csv(out / "queries_bar.csv", [f"x{i + 1}" for i in range(d)],
                     [[fmt(v) for v in row] for row in result.x_bar])
    atomic_write_json(out / "lambda.json", {"lam": [float(v) for v in result.lam], "xbar_index": result.xbar_index,
                                            "stopped_early": result.stopped_early})
    for ck in result.checkpoints:
        atomic_write_json(out / "checkpoints" / f"k{ck['k']:05d}.json",
                          {"k": ck["k"], "x": ck["x"].tolist(), "lam": ck["lam"].tolist(), "beta": ck["beta"].tolist()})
    return h
