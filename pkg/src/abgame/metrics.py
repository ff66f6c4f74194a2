"""Bounded losses, server/adversary utilities and AB-curve assembly."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .attack import LowerLevelProblem, fit_lower
from .batch import LabeledBatch
from .defense import DefenseOracle, strategy_label
from .errors import DimensionError, ParameterError, UnsupportedLossError
from .io import atomic_write_csv, atomic_write_json, fmt
from .numeric import as_finite, make_rng, sigmoid

LOSS_NAMES = ("zero_one", "cross_entropy", "scaled_l2", "thresholded")
SCALED_L2_GUARD = 1e-12
CE_FLOOR = 1e-6


@dataclass(frozen=True)
class LossKind:
    """A loss bounded by ``K`` so utilities land in [0, 1].

    Cross-entropy clips probabilities to [CE_FLOOR, 1 - CE_FLOOR], which
    bounds it by -log(CE_FLOOR).  Scaled L2 is truncated at ``K``.
    """

    name: str
    r: float | None = None
    K: float | None = None

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise UnsupportedLossError(f"unknown loss {self.name!r}")
        if self.name == "thresholded":
            if self.r is None or not self.r > 0:
                raise ParameterError("thresholded loss needs r > 0")
        if self.K is not None and not self.K > 0:
            raise ParameterError("loss bound K must be positive")

    @property
    def bound(self) -> float:
        if self.name in ("zero_one", "thresholded"):
            return 1.0
        if self.name == "cross_entropy":
            return -math.log(CE_FLOOR)
        return 4.0 if self.K is None else float(self.K)

    def values(self, y, yhat) -> np.ndarray:
        """Per-sample losses; rows of 2-D inputs are vectors (one-hot or probabilities)."""
        y = np.asarray(y, dtype=np.float64)
        yhat = np.asarray(yhat, dtype=np.float64)
        if y.shape != yhat.shape:
            raise DimensionError(f"label shapes differ: {y.shape} vs {yhat.shape}")
        if self.name == "zero_one":
            out = (y != yhat)
            return (out.any(axis=1) if out.ndim == 2 else out).astype(np.float64)
        if self.name == "cross_entropy":
            q = np.clip(yhat, CE_FLOOR, 1.0 - CE_FLOOR)
            if y.ndim == 2:
                v = -np.sum(y * np.log(q), axis=1)
            else:
                v = -(y * np.log(q) + (1.0 - y) * np.log1p(-q))
            return np.clip(v, 0.0, self.bound)
        if self.name == "scaled_l2":
            if y.ndim == 2:
                v = np.sum((y - yhat) ** 2, axis=1) / (np.sum(y ** 2, axis=1) + SCALED_L2_GUARD)
            else:
                v = (y - yhat) ** 2 / (y ** 2 + SCALED_L2_GUARD)
            return np.minimum(v, self.bound)
        p = y if y.ndim == 2 else np.column_stack([y, 1.0 - y])
        q = yhat if yhat.ndim == 2 else np.column_stack([yhat, 1.0 - yhat])
        return (np.sum((p - q) ** 2, axis=1) >= self.r).astype(np.float64)


def ZeroOne() -> LossKind:
    return LossKind("zero_one")


def CrossEntropy() -> LossKind:
    return LossKind("cross_entropy")


def ScaledL2(K: float = 4.0) -> LossKind:
    return LossKind("scaled_l2", K=K)


def ThresholdedProbDist(r: float = 0.1) -> LossKind:
    return LossKind("thresholded", r=r)


# --------------------------------------------------------------------------
# utilities
# --------------------------------------------------------------------------

def server_utility(y_true, y_defended, loss: LossKind | None = None) -> float:
    """1 - mean loss / K between authentic and defended responses."""
    loss = loss or ZeroOne()
    y_true = np.asarray(y_true)
    y_defended = np.asarray(y_defended)
    if y_true.shape[0] != y_defended.shape[0]:
        raise DimensionError(f"{y_true.shape[0]} authentic vs {y_defended.shape[0]} defended responses")
    if y_true.shape[0] == 0:
        raise DimensionError("no responses to compare")
    u = 1.0 - float(np.mean(loss.values(y_true, y_defended))) / loss.bound
    return min(max(u, 0.0), 1.0)


def _hard(model, X):
    if hasattr(model, "hard"):
        return np.asarray(model.hard(X))
    return np.argmax(model.proba(X), axis=1)


def _proba(model, X):
    if hasattr(model, "proba"):
        return np.asarray(model.proba(X), dtype=np.float64)
    p = sigmoid(model.raw(X))
    return np.column_stack([p, 1.0 - p])


def adversary_utility(f_A, f_S, X_test, loss: LossKind | None = None) -> float:
    """1 - R_n(f_A, f_S) / K on a test batch, against the authentic server."""
    loss = loss or ZeroOne()
    X = as_finite(X_test, "test batch")
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionError("empty or malformed test batch")
    if loss.name == "zero_one":
        v = loss.values(_hard(f_S, X), _hard(f_A, X))
    elif loss.name == "cross_entropy":
        target = _proba(f_S, X)
        onehot = np.zeros_like(target)
        onehot[np.arange(X.shape[0]), np.argmax(target, axis=1)] = 1.0
        v = loss.values(onehot, _proba(f_A, X))
    elif loss.name == "scaled_l2":
        v = loss.values(f_S.raw(X), f_A.raw(X))
    else:
        v = loss.values(_proba(f_S, X), _proba(f_A, X))
    u = 1.0 - float(np.mean(v)) / loss.bound
    return min(max(u, 0.0), 1.0)


# --------------------------------------------------------------------------
# AB points and curves
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ABPoint:
    pair_id: str
    params: str
    b_mean: float
    b_stderr: float
    a_mean: float
    a_stderr: float
    reps: int
    test_size: int

    def __post_init__(self):
        for name in ("b_mean", "a_mean"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ParameterError(f"{name}={v} outside [0, 1]")

    @property
    def b(self) -> float:
        return self.b_mean

    @property
    def a(self) -> float:
        return self.a_mean


def _stderr(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def summarize(pair_id: str, params: str, samples, test_size: int) -> ABPoint:
    """ABPoint from a list of per-replication (b, a) tuples."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    return ABPoint(pair_id, params, float(s[:, 0].mean()), _stderr(s[:, 0]),
                   float(s[:, 1].mean()), _stderr(s[:, 1]), int(s.shape[0]), int(test_size))


def replicate(trial: Callable[[np.random.Generator], tuple], reps: int, seed: int, key="rep",
              workers: int = 1) -> list:
    """Run ``trial(rng)`` for ``reps`` independent seeded generators.

    Each replication gets ``make_rng(seed, key, i)``, so results do not
    depend on ``workers``; they are returned in replication order.
    """
    if reps < 1:
        raise ParameterError("reps must be at least 1")
    rngs = [make_rng(seed, key, i) for i in range(reps)]
    if workers <= 1:
        return [trial(r) for r in rngs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(trial, rngs))


@dataclass(frozen=True, eq=False)
class ExtractionScenario:
    """Everything fixed across the strategy pairs of one AB curve.

    ``query_sampler(n, rng)`` and ``test_sampler(n, rng)`` draw (n, d)
    matrices; the test distribution plays the role of Q.
    """

    server: object
    query_sampler: Callable
    n_queries: int
    test_sampler: Callable
    test_size: int = 100_000
    mode: str = "hard"
    server_loss: LossKind = ZeroOne()
    eval_loss: LossKind = ZeroOne()


def _authentic_vs_defended(server, batch: LabeledBatch, loss: LossKind):
    if loss.name == "zero_one":
        defended = batch.y if batch.mode == "hard" else np.where(batch.y >= 0.5, 1, -1)
        return server.hard(batch.X), defended
    p = sigmoid(server.raw(batch.X))
    if batch.mode == "hard":
        return p, batch.targets01()
    return p, batch.y


def fit_adversary(adversary, batch: LabeledBatch, rng: np.random.Generator):
    """A LowerLevelProblem is fitted from beta = 0 (linear kinds) or N(0, I);
    any other adversary is called as ``adversary(batch, rng)``."""
    if isinstance(adversary, LowerLevelProblem):
        d = batch.X.shape[1]
        beta0 = None if adversary.kind == "mlp2" else np.zeros(adversary.n_params(d))
        beta, _ = fit_lower(adversary, batch, beta0, rng)
        return adversary.template(d, beta)
    return adversary(batch, rng)


def extraction_trial(scenario: ExtractionScenario, strategy, adversary, rng: np.random.Generator,
                     n_queries: int | None = None) -> tuple:
    """One replication: query, defend, fit, evaluate.  Returns (b, a)."""
    r_q, r_o, r_f, r_t = rng.spawn(4)
    n = scenario.n_queries if n_queries is None else n_queries
    Q = scenario.query_sampler(n, r_q)
    oracle = DefenseOracle(scenario.server, strategy, r_o, scenario.mode)
    batch = oracle.respond(Q)
    b = server_utility(*_authentic_vs_defended(scenario.server, batch, scenario.server_loss), scenario.server_loss)
    f_A = fit_adversary(adversary, batch, r_f)
    T = scenario.test_sampler(scenario.test_size, r_t)
    a = adversary_utility(f_A, scenario.server, T, scenario.eval_loss)
    return b, a


def ab_curve(scenario: ExtractionScenario, pairs, reps: int, test_size: int | None = None,
             seed: int = 0, workers: int = 1) -> list:
    """One ABPoint per (pair_id, strategy, adversary) triple, averaged over ``reps``."""
    if test_size is not None:
        scenario = ExtractionScenario(**{**scenario.__dict__, "test_size": int(test_size)})
    points = []
    for pair_id, strategy, adversary in pairs:
        samples = replicate(lambda r: extraction_trial(scenario, strategy, adversary, r),
                            reps, seed, key=str(pair_id), workers=workers)
        points.append(summarize(str(pair_id), strategy_label(strategy), samples, scenario.test_size))
    return points


AB_COLUMNS = ("pair_id", "strategy_params", "b_mean", "b_stderr", "a_mean", "a_stderr", "reps", "test_size")


def write_ab_csv(points, path, config: dict | None = None) -> None:
    """CSV of AB points plus a JSON mirror (same stem) carrying ``config``."""
    path = Path(path)
    rows = [[p.pair_id, p.params, fmt(p.b_mean), fmt(p.b_stderr), fmt(p.a_mean), fmt(p.a_stderr),
             p.reps, p.test_size] for p in points]
    atomic_write_csv(path, AB_COLUMNS, rows)
    atomic_write_json(path.with_suffix(".json"), {"config": config or {}, "points": [asdict(p) for p in points]})


def read_ab_json(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [ABPoint(**p) for p in doc["points"]]
