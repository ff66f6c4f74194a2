"""Scalar-output parametric classifiers with exact first and second derivatives.

Three kinds share one flat parameter vector ``beta``:

``linear`` / ``logistic``
    raw(x) = w.x + b, with ``beta = [w, b]`` (bias as an appended constant
    feature). The two kinds differ only in their customary training loss.
``mlp2``
    raw(x) = a.tanh(W x + c) + b0, ``beta = [W.ravel(), c, a, b0]``.
    tanh keeps the network twice continuously differentiable.

Training losses act on the raw score:

``xent``     cross-entropy between sigmoid(raw) and a soft target in [0, 1]
``squared``  (raw - target)^2
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError, UnsupportedLossError
from .numeric import as_finite, sigmoid, softplus

KINDS = ("linear", "logistic", "mlp2")
TRAIN_LOSSES = ("xent", "squared")
CHECKPOINT_FORMAT = "abgame-model"
CHECKPOINT_VERSION = 1


def param_count(kind: str, dim: int, hidden: int = 0) -> int:
    if kind in ("linear", "logistic"):
        return dim + 1
    if kind == "mlp2":
        if hidden < 1:
            raise ParameterError("mlp2 needs hidden >= 1")
        return hidden * dim + 2 * hidden + 1
    raise ParameterError(f"unknown model kind {kind!r}")


@dataclass(frozen=True)
class Prediction:
    raw: float
    soft: float
    hard: int


@dataclass(frozen=True, eq=False)
class Model:
    kind: str
    dim: int
    beta: np.ndarray
    hidden: int = 0

    def __post_init__(self):
        beta = as_finite(self.beta, "beta", ndim=1)
        expected = param_count(self.kind, self.dim, self.hidden)
        if beta.size != expected:
            raise DimensionError(f"{self.kind} with dim={self.dim} needs {expected} parameters, got {beta.size}")
        beta = beta.copy()
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)

    @property
    def n_params(self) -> int:
        return self.beta.size

    def with_beta(self, beta) -> "Model":
        return Model(self.kind, self.dim, beta, self.hidden)

    def _check_batch(self, X) -> np.ndarray:
        X = as_finite(X, "X")
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise DimensionError(f"expected points of dimension {self.dim}, got shape {X.shape}")
        return X

    def raw(self, X) -> np.ndarray:
        """Raw scores for a batch ``X`` of shape (n, dim)."""
        X = self._check_batch(X)
        if self.kind == "mlp2":
            W, c, a, b0 = _unpack_mlp(self.beta, self.dim, self.hidden)
            return np.tanh(X @ W.T + c) @ a + b0
        return X @ self.beta[:-1] + self.beta[-1]

    def hard(self, X) -> np.ndarray:
        return sign(self.raw(X))

    def soft(self, X) -> np.ndarray:
        return sigmoid(self.raw(X))

    def forward(self, x) -> Prediction:
        x = as_finite(x, "x", ndim=1)
        r = float(self.raw(x)[0])
        return Prediction(raw=r, soft=float(sigmoid(r)), hard=1 if r >= 0 else -1)


def raw_grad_x(model: Model, X) -> np.ndarray:
    """d raw(x_i) / d x_i for each row, shape (n, d)."""
    return _Pieces(model, model._check_batch(X)).dr_dx()


def sign(r) -> np.ndarray:
    """sgn with the tie sgn(0) = +1."""
    return np.where(np.asarray(r) >= 0, 1, -1).astype(np.int64)


def _unpack_mlp(beta, dim, hidden):
    k = hidden * dim
    W = beta[:k].reshape(hidden, dim)
    c = beta[k:k + hidden]
    a = beta[k + hidden:k + 2 * hidden]
    return W, c, a, beta[-1]


def init_model(kind: str, dim: int, rng: np.random.Generator, hidden: int = 32) -> Model:
    """Model with beta ~ N(0, I)."""
    h = hidden if kind == "mlp2" else 0
    return Model(kind, dim, rng.standard_normal(param_count(kind, dim, h)), h)


def linear_model(weights, bias: float = 0.0, kind: str = "linear") -> Model:
    w = as_finite(weights, "weights", ndim=1)
    return Model(kind, w.size, np.append(w, bias))


# --------------------------------------------------------------------------
# training losses on the raw score
# --------------------------------------------------------------------------

def _check_loss(loss: str):
    if loss not in TRAIN_LOSSES:
        raise UnsupportedLossError(f"loss {loss!r} is not differentiable in the raw score; use one of {TRAIN_LOSSES}")


def loss_value(loss, r, t):
    _check_loss(loss)
    if loss == "xent":
        return softplus(r) - t * r
    return (r - t) ** 2


def loss_d1(loss, r, t):
    """d loss / d raw."""
    if loss == "xent":
        return sigmoid(r) - t
    return 2.0 * (r - t)


def loss_d2(loss, r, t):
    """d^2 loss / d raw^2."""
    if loss == "xent":
        p = sigmoid(r)
        return p * (1.0 - p)
    return np.full_like(np.asarray(r, dtype=np.float64), 2.0)


def loss_dt(loss):
    """d (d loss / d raw) / d target; constant for both losses."""
    return -1.0 if loss == "xent" else -2.0


# --------------------------------------------------------------------------
# per-point derivative pieces
# --------------------------------------------------------------------------

class _Pieces:
    """Forward quantities for a batch, reused by every derivative routine."""

    def __init__(self, model: Model, X: np.ndarray):
        self.model = model
        self.X = X
        if model.kind == "mlp2":
            W, c, a, b0 = _unpack_mlp(model.beta, model.dim, model.hidden)
            self.W, self.c, self.a = W, c, a
            self.t = np.tanh(X @ W.T + c)          # (n, h)
            self.t1 = 1.0 - self.t ** 2            # tanh'
            self.t2 = -2.0 * self.t * self.t1      # tanh''
            self.r = self.t @ a + b0
        else:
            self.w = model.beta[:-1]
            self.r = X @ self.w + model.beta[-1]

    def jac(self) -> np.ndarray:
        """d raw_i / d beta, shape (n, P)."""
        n = self.X.shape[0]
        if self.model.kind == "mlp2":
            at1 = self.a * self.t1
            dW = (at1[:, :, None] * self.X[:, None, :]).reshape(n, -1)
            return np.hstack([dW, at1, self.t, np.ones((n, 1))])
        return np.hstack([self.X, np.ones((n, 1))])

    def jvp(self, v) -> np.ndarray:
        """J v, shape (n,)."""
        m = self.model
        if m.kind == "mlp2":
            VW, vc, va, vb = _unpack_mlp(v, m.dim, m.hidden)
            self._s = self.X @ VW.T + vc           # dz along v, (n, h)
            return (self.a * self.t1 * self._s).sum(1) + self.t @ va + vb
        return self.X @ v[:-1] + v[-1]

    def hess_r_v(self, v) -> np.ndarray:
        """(d^2 raw_i / d beta^2) v for each i, shape (n, P); call after jvp(v)."""
        m = self.model
        n = self.X.shape[0]
        if m.kind != "mlp2":
            return np.zeros((n, m.n_params))
        _, _, va, _ = _unpack_mlp(v, m.dim, m.hidden)
        s = self._s
        g = va * self.t1 + self.a * self.t2 * s    # d(a_k t'_k)[v]
        dW = (g[:, :, None] * self.X[:, None, :]).reshape(n, -1)
        return np.hstack([dW, g, self.t1 * s, np.zeros((n, 1))])

    def dr_dx(self) -> np.ndarray:
        """d raw_i / d x_i, shape (n, d)."""
        if self.model.kind == "mlp2":
            return (self.a * self.t1) @ self.W
        return np.broadcast_to(self.w, self.X.shape).copy()

    def djvp_dx(self, v) -> np.ndarray:
        """d (J_i v) / d x_i, shape (n, d); call after jvp(v)."""
        m = self.model
        if m.kind == "mlp2":
            VW, _, va, _ = _unpack_mlp(v, m.dim, m.hidden)
            coef = self.a * self.t2 * self._s + va * self.t1   # (n, h)
            return coef @ self.W + (self.a * self.t1) @ VW
        return np.broadcast_to(v[:-1], self.X.shape).copy()


def _prep(model: Model, X, targets):
    X = model._check_batch(X)
    t = as_finite(targets, "targets").reshape(-1)
    if t.size != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} points but {t.size} targets")
    return X, t


def objective(model: Model, X, loss: str, targets, ridge: float = 0.0) -> float:
    """sum_i loss(raw_i, t_i) + ridge * ||beta||^2."""
    X, t = _prep(model, X, targets)
    return float(np.sum(loss_value(loss, model.raw(X), t)) + ridge * model.beta @ model.beta)


def grad_beta(model: Model, X, loss: str, targets, ridge: float = 0.0) -> np.ndarray:
    _check_loss(loss)
    X, t = _prep(model, X, targets)
    P = _Pieces(model, X)
    return loss_d1(loss, P.r, t) @ P.jac() + 2.0 * ridge * model.beta


def grad_x(model: Model, X, loss: str, targets) -> np.ndarray:
    """Gradient of each point's loss w.r.t. that point (targets held fixed).

    Returns shape (n, d), or (d,) for a single 1-D point.
    """
    _check_loss(loss)
    single = np.ndim(X) == 1
    X, t = _prep(model, X, targets)
    P = _Pieces(model, X)
    g = loss_d1(loss, P.r, t)[:, None] * P.dr_dx()
    return g[0] if single else g


def hvp_beta(model: Model, X, loss: str, targets, v, ridge: float = 0.0) -> np.ndarray:
    """(d^2 h / d beta^2) v including the ridge term's 2*ridge*v."""
    _check_loss(loss)
    X, t = _prep(model, X, targets)
    v = as_finite(v, "v", ndim=1)
    if v.size != model.n_params:
        raise DimensionError(f"v has {v.size} entries, model has {model.n_params} parameters")
    P = _Pieces(model, X)
    Jv = P.jvp(v)
    out = (loss_d2(loss, P.r, t) * Jv) @ P.jac()
    if model.kind == "mlp2":
        out = out + loss_d1(loss, P.r, t) @ P.hess_r_v(v)
    return out + 2.0 * ridge * v


def hessian_beta(model: Model, X, loss: str, targets, ridge: float = 0.0) -> np.ndarray:
    """Dense Hessian, built column by column from HVPs."""
    eye = np.eye(model.n_params)
    return np.column_stack([hvp_beta(model, X, loss, targets, e, ridge) for e in eye])


def cross_hvp_xbeta(model: Model, X, loss: str, targets, v, target_grad=None) -> np.ndarray:
    """(d^2 h / d x d beta) v, one row per query point, shape (n, d).

    ``target_grad`` (n, d) carries d target_i / d x_i when the targets are
    themselves functions of the queries (defended responses are); omit it
    for fixed targets.
    """
    _check_loss(loss)
    X, t = _prep(model, X, targets)
    v = as_finite(v, "v", ndim=1)
    if v.size != model.n_params:
        raise DimensionError(f"v has {v.size} entries, model has {model.n_params} parameters")
    P = _Pieces(model, X)
    Jv = P.jvp(v)
    out = (loss_d2(loss, P.r, t) * Jv)[:, None] * P.dr_dx()
    out += loss_d1(loss, P.r, t)[:, None] * P.djvp_dx(v)
    if target_grad is not None:
        tg = as_finite(target_grad, "target_grad")
        if tg.shape != X.shape:
            raise DimensionError(f"target_grad must have shape {X.shape}")
        out += (loss_dt(loss) * Jv)[:, None] * tg
    return out


def ridge_closed_form(X, y, mu: float, fit_intercept: bool = False) -> np.ndarray:
    """argmin_beta ||X beta - y||^2 + mu ||beta||^2 = (X^T X + mu I)^{-1} X^T y.

    With ``fit_intercept`` a constant-1 column is appended, matching the
    linear model's parameter layout (the bias is penalised too).
    """
    if not mu > 0:
        raise ParameterError("ridge coefficient must be positive (strong convexity)")
    X = as_finite(X, "X")
    if X.ndim == 1:
        X = X[:, None]
    y = as_finite(y, "y").reshape(-1)
    if y.size != X.shape[0]:
        raise DimensionError("X and y lengths differ")
    if fit_intercept:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    A = X.T @ X + mu * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ y)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def model_to_dict(model: Model) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "dim": model.dim,
        "hidden": model.hidden,
        "beta": [float(b) for b in model.beta],
    }


def model_from_dict(d: dict) -> Model:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError("not an abgame model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ParameterError(f"unsupported checkpoint version {d.get('version')}")
    return Model(d["kind"], int(d["dim"]), np.array(d["beta"], dtype=np.float64), int(d.get("hidden", 0)))


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
