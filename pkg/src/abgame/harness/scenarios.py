"""Scenario definitions: data, servers, defense catalogs and defaults."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attack import LowerLevelProblem, solve_inner
from ..defense import SinePerturb, Substitute, defended_score, defended_score_grad
from ..errors import ConfigError, DataError
from ..models import Model, linear_model
from ..numeric import make_rng
from ..theory import BoxQ

T1_AMPLITUDES = (0.1, 0.5, 1, 5, 10, 15)
T1_FREQUENCIES = (0.1, -0.1, 1, -1, 5, -5, 8, -8)

# Defaults for every scenario kind; a config file overrides any subset.
DEFAULTS = {
    "case1": {
        "seed": 0, "reps": 50, "test_size": 100_000, "n_queries": 40,
        "server_weights": [-0.75, 0.75, -1.5], "server_bias": 0.0,
        "amplitude": 2.0, "frequency": 3.0, "query_box": [-3.0, 3.0], "test_box": [-3.0, 3.0],
        "ridge": 1e-2, "tol": 1e-6,
        "expect": {"b": 0.86, "a": 0.92, "tol": 0.02},
    },
    "case2": {
        "seed": 0, "reps": 50, "test_size": 100_000, "n_queries": 40,
        "server_weights": [-0.75, 0.75, -1.5], "server_bias": 0.0,
        "amplitude": 0.8, "frequency": 1.0, "query_box": [0.0, 6.0], "test_box": [-3.0, 3.0],
        "ridge": 1e-2, "tol": 1e-6,
        "expect": {"b": 0.98, "a": 0.90, "tol": 0.02},
    },
    "t1": {
        "seed": 0, "reps": 20, "test_size": 100_000, "n_queries": 200, "K": 100,
        "r0": 1000.0, "s0": 10.0, "schedule": "diminishing", "neumann_steps": 50,
        "minibatch": 1000, "ridge": 1e-2, "tol": 1e-6, "inner_steps": None,
        "stop_rtol": None, "trace_size": 10_000, "box": [-10.0, 10.0],
        "delta": 1.0, "smooth_window": 5, "plateau_rtol": 0.05,
        "expect_winner": [15.0, 0.1], "min_winner_seeds": 15, "onehot_tol": 0.01, "min_concentration_seeds": 15,
        "checkpoint_every": 0,
    },
    "t2": {
        "seed": 0, "reps": 5, "classes": [2, 8], "test_fraction": 0.4,
        "server_hidden": 16, "server_ridge": 1e-2,
        "substitute_ridges": [0.3, 1.0, 3.0, 10.0, 30.0],
        "n_queries": 100, "K": 50, "r0": 1000.0, "s0": 1.0, "neumann_steps": 50,
        "minibatch": 256, "ridge": 1e-2, "tol": 1e-3, "stop_rtol": 1e-3,
        "min_above_fraction": 0.8, "idx_images": None, "idx_labels": None,
    },
    "t3": {
        "seed": 0, "reps": 5, "temperatures": [0.5, 1.0, 2.0, 5.0, 10.0], "r": 0.1,
        "n_queries": 500, "test_fraction": 0.4, "ridge": 1e-2, "tol": 1e-3,
    },
    "theory": {
        "seed": 0, "eps": 0.1, "budget": 100_000, "negative_flip_prob": 0.9,
        "equilibrium_eps": 0.2, "equilibrium_tol": 0.01, "uniform_flip_c": [0.3, 0.7],
        "uniform_flip_queries": 5000, "trend_sizes": [1000, 10000, 20000], "trend_seeds": 10,
        "trend_eps": 0.2, "trend_t": 0.01, "trend_dim": 10,
    },
}


def resolve_config(doc: dict) -> dict:
    """Fill defaults for ``doc["scenario"]``; unknown keys are a ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    name = doc.get("scenario")
    if name not in DEFAULTS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(DEFAULTS)}")
    base = copy.deepcopy(DEFAULTS[name])
    extra = set(doc) - set(base) - {"scenario"}
    if extra:
        raise ConfigError(f"unknown keys for {name}: {sorted(extra)}")
    for k, v in doc.items():
        if k == "scenario":
            continue
        default = base[k]
        if default is not None and v is not None and isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{name}.{k} must be a number")
        if isinstance(default, list) and not isinstance(v, list):
            raise ConfigError(f"{name}.{k} must be a list")
        base[k] = v
    if base.get("reps", 1) < 1:
        raise ConfigError("reps must be at least 1")
    base["scenario"] = name
    return base


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return resolve_config(doc)


# --------------------------------------------------------------------------
# T1: two-dimensional synthetic game
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class T1Data:
    server: Model
    strategies: list
    test_X: np.ndarray
    test_y: np.ndarray
    x0: np.ndarray


def t1_strategies() -> list:
    """The 48 sine strategies, amplitude-major (1-based index 42 is (15, -0.1))."""
    return [SinePerturb(m, w) for m in T1_AMPLITUDES for w in T1_FREQUENCIES]


def t1_labels(X) -> np.ndarray:
    return np.where(X[:, 0] >= X[:, 1] - 1.0, 1.0, -1.0)


def gen_t1(seed: int, n_queries: int = 200, test_size: int = 100_000) -> T1Data:
    """Server sgn(x1 - x2 + 1), uniform test set on [-10, 10]^2 and N(0, I) queries."""
    T = make_rng(seed, "t1", "test").uniform(-10.0, 10.0, size=(test_size, 2))
    x0 = make_rng(seed, "t1", "queries").standard_normal((n_queries, 2))
    return T1Data(linear_model([1.0, -1.0], 1.0), t1_strategies(), T, t1_labels(T), x0)


def boundary_concentration(X, server: Model, strategy, delta: float) -> float:
    """Fraction of queries within normalised distance ``delta`` of the defended boundary.

    Distance is |f^g(x)| / ||grad f^g(x)||, the first-order distance to the
    zero set of the defended score.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    s = defended_score(server, strategy, X)
    g = np.linalg.norm(defended_score_grad(server, strategy, X), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(g > 0, np.abs(s) / g, np.where(s == 0, 0.0, np.inf))
    return float(np.mean(dist <= delta))


# --------------------------------------------------------------------------
# Cases 1 and 2: three-dimensional hyperplane with sine perturbation
# --------------------------------------------------------------------------

def case_setup(cfg: dict):
    from ..metrics import ExtractionScenario

    server = linear_model(cfg["server_weights"], cfg["server_bias"])
    lo, hi = cfg["query_box"]
    tlo, thi = cfg["test_box"]
    scen = ExtractionScenario(server, BoxQ(server.dim, lo, hi), cfg["n_queries"], BoxQ(server.dim, tlo, thi),
                              cfg["test_size"])
    strategy = SinePerturb(cfg["amplitude"], cfg["frequency"])
    adversary = LowerLevelProblem("logistic", "xent", ridge=cfg["ridge"], tol=cfg["tol"], solver="newton")
    return scen, strategy, adversary


# --------------------------------------------------------------------------
# digit data (T2 and the T3 surrogate)
# --------------------------------------------------------------------------

def load_digits_data(classes=None, idx_images=None, idx_labels=None):
    """(X in [0, 1], labels).  IDX files when given, else the bundled 8x8 digits."""
    if idx_images or idx_labels:
        if not (idx_images and idx_labels):
            raise DataError("both idx_images and idx_labels are needed")
        from .idx import load_idx

        ds = load_idx(idx_images, idx_labels, classes)
        return ds.X, np.asarray(ds.labels)
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    X = X / 16.0
    if classes is None:
        return X, y
    a, b = classes
    keep = np.isin(y, [a, b])
    return X[keep], np.where(y[keep] == a, 1, -1)


def split(X, y, test_fraction: float, seed: int):
    perm = make_rng(seed, "split").permutation(X.shape[0])
    k = int(round(X.shape[0] * (1.0 - test_fraction)))
    tr, te = perm[:k], perm[k:]
    return X[tr], y[tr], X[te], y[te]


def train_model(X, y, kind: str, ridge: float, seed: int, hidden: int = 16) -> Model:
    """Fit a server/substitute on +-1 labels by L-BFGS on the cross-entropy."""
    prob = LowerLevelProblem(kind, "xent", ridge=ridge, tol=1e-4, max_iter=3000, solver="lbfgs", hidden=hidden)
    t = (np.asarray(y, dtype=np.float64) + 1.0) / 2.0
    rng = make_rng(seed, "train", kind, repr(ridge))
    beta0 = 0.1 * rng.standard_normal(prob.n_params(X.shape[1]))
    beta, _ = solve_inner(prob, X, t, beta0, rng)
    return prob.template(X.shape[1], beta)


@dataclass(frozen=True, eq=False)
class T2Data:
    server: Model
    strategies: list
    train_X: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray


def t2_setup(cfg: dict) -> T2Data:
    X, y = load_digits_data(tuple(cfg["classes"]), cfg.get("idx_images"), cfg.get("idx_labels"))
    Xtr, ytr, Xte, _ = split(X, y, cfg["test_fraction"], cfg["seed"])
    server = train_model(Xtr, ytr, "mlp2", cfg["server_ridge"], cfg["seed"], cfg["server_hidden"])
    subs = [Substitute(train_model(Xtr, ytr, "mlp2", r, cfg["seed"] + 1, cfg["server_hidden"]))
            for r in cfg["substitute_ridges"]]
    # the upper level scores against the server's authentic labels
    return T2Data(server, subs, Xtr, Xte, server.hard(Xte).astype(np.float64))


# --------------------------------------------------------------------------
# multi-class one-vs-rest models (T3 surrogate)
# --------------------------------------------------------------------------

def softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class OvRModel:
    """C binary scorers; probabilities are the softmax of the score vector / T."""

    heads: tuple
    T: float = 1.0

    @property
    def dim(self):
        return self.heads[0].dim

    def raw(self, X) -> np.ndarray:
        return np.column_stack([h.raw(X) for h in self.heads])

    def proba(self, X) -> np.ndarray:
        return softmax(self.raw(X) / self.T)

    def hard(self, X) -> np.ndarray:
        return np.argmax(self.raw(X), axis=1)

    def with_temperature(self, T: float) -> "OvRModel":
        return OvRModel(self.heads, T)


def train_ovr(X, labels, n_classes: int, ridge: float, seed: int) -> OvRModel:
    heads = []
    for c in range(n_classes):
        yc = np.where(labels == c, 1.0, -1.0)
        heads.append(train_model(X, yc, "logistic", ridge, seed + c))
    return OvRModel(tuple(heads))


def fit_ovr_soft(X, P, ridge: float, tol: float) -> OvRModel:
    """Adversary: one logistic head per class regressing that class's probability."""
    prob = LowerLevelProblem("logistic", "xent", ridge=ridge, tol=tol, solver="newton")
    heads = []
    for c in range(P.shape[1]):
        beta, _ = solve_inner(prob, X, P[:, c], np.zeros(X.shape[1] + 1))
        heads.append(prob.template(X.shape[1], beta))
    return OvRModel(tuple(heads))
