"""Defense strategies and the oracle an adversary queries.

Every strategy maps the server's raw score ``f_S(x)`` to a defended score
``f_S^g(x)``.  Randomised strategies (flips) multiply the score by a
Bernoulli sign drawn once per queried point, in batch order.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .batch import LabeledBatch
from .errors import DegenerateRegionError, DimensionError, ParameterError
from .models import Model, raw_grad_x, sign
from .numeric import as_finite, sigmoid

CATALOG_FORMAT = "abgame-strategies"
CATALOG_VERSION = 1


# --------------------------------------------------------------------------
# regions
# --------------------------------------------------------------------------

def boundary_distance(server: Model, X) -> np.ndarray:
    """|f_S(x)| / ||grad_x f_S(x)||; Euclidean distance to the hyperplane for linear f_S."""
    X = np.atleast_2d(as_finite(X, "X"))
    g = np.linalg.norm(raw_grad_x(server, X), axis=1)
    return np.abs(server.raw(X)) / np.maximum(g, 1e-300)


@dataclass(frozen=True)
class BoundaryBand:
    """Points whose normalised distance to the server's decision boundary is at most ``width``."""

    width: float

    def __post_init__(self):
        if not self.width >= 0:
            raise ParameterError("band width must be non-negative")

    def contains(self, X, server: Model) -> np.ndarray:
        return boundary_distance(server, X) <= self.width


@dataclass(frozen=True)
class HalfspaceBand:
    """|direction.x + offset| / ||direction|| <= width, independent of the server."""

    direction: tuple
    offset: float
    width: float

    def __post_init__(self):
        if not self.width >= 0:
            raise ParameterError("band width must be non-negative")
        if not np.any(np.asarray(self.direction, dtype=float)):
            raise ParameterError("band direction must be non-zero")

    def contains(self, X, server: Model | None = None) -> np.ndarray:
        d = np.asarray(self.direction, dtype=float)
        X = np.atleast_2d(as_finite(X, "X"))
        return np.abs(X @ d + self.offset) / np.linalg.norm(d) <= self.width


@dataclass(frozen=True)
class ExplicitPredicate:
    predicate: Callable[[np.ndarray], np.ndarray]

    def contains(self, X, server: Model | None = None) -> np.ndarray:
        return np.asarray(self.predicate(np.atleast_2d(X)), dtype=bool)


Region = Union[BoundaryBand, HalfspaceBand, ExplicitPredicate]


def region_mass(region: Region, server: Model, sampler: Callable, n: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of P(x in region) with x drawn by ``sampler(n, rng)``."""
    return float(np.mean(region.contains(sampler(n, rng), server)))


# --------------------------------------------------------------------------
# strategies
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    randomized = False


@dataclass(frozen=True)
class SinePerturb:
    """Additive perturbation ``amplitude * sin(frequency * u)``.

    ``u`` is input coordinate ``coord`` (``on="coord"``) or the server's own
    score (``on="score"``).
    """

    amplitude: float
    frequency: float
    coord: int = 0
    on: str = "coord"
    randomized = False

    def __post_init__(self):
        if not (math.isfinite(self.amplitude) and math.isfinite(self.frequency)):
            raise ParameterError("amplitude and frequency must be finite")
        if self.on not in ("coord", "score"):
            raise ParameterError("SinePerturb.on must be 'coord' or 'score'")


@dataclass(frozen=True)
class BoundaryFlip:
    region: Region
    flip_prob: float = 0.5
    randomized = True

    def __post_init__(self):
        _check_prob(self.flip_prob)


@dataclass(frozen=True)
class UniformFlip:
    """Flip every label with probability ``c`` (a constant or a function of x)."""

    c: Union[float, Callable[[np.ndarray], np.ndarray]]
    randomized = True

    def __post_init__(self):
        if not callable(self.c):
            _check_prob(self.c)

    def probs(self, X) -> np.ndarray:
        if callable(self.c):
            p = np.asarray(self.c(X), dtype=float)
            if np.any(p < 0) or np.any(p > 1):
                raise ParameterError("flip probability field left [0, 1]")
            return np.broadcast_to(p, (X.shape[0],))
        return np.full(X.shape[0], float(self.c))


@dataclass(frozen=True)
class Bdpl:
    """Boundary differentially private layer: flips inside the delta-band."""

    delta: float
    t: float
    randomized = True

    def __post_init__(self):
        if not self.delta >= 0:
            raise ParameterError("delta must be non-negative")
        bdpl_flip_prob(self.t)

    def as_boundary_flip(self) -> BoundaryFlip:
        return BoundaryFlip(BoundaryBand(self.delta), bdpl_flip_prob(self.t))


@dataclass(frozen=True)
class Temperature:
    """Soft responses sigmoid(f/T); hard labels are unchanged."""

    T: float
    randomized = False

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError("temperature must be positive")


@dataclass(frozen=True, eq=False)
class Substitute:
    """Answer with a different model (e.g. one trained under other regularisation)."""

    model: Model
    randomized = False


Strategy = Union[Identity, SinePerturb, BoundaryFlip, UniformFlip, Bdpl, Temperature, Substitute]


def _check_prob(p):
    if not (0.0 <= p <= 1.0):
        raise ParameterError(f"probability {p} outside [0, 1]")


def bdpl_flip_prob(t: float) -> float:
    """1/2 - sqrt(e^{2t} - 1) / (2 + 2 e^t), evaluated in a cancellation-free form.

    With a = e^{-t} the expression equals a / (1 + a + sqrt(1 - a^2)), which
    decreases from 1/2 at t = 0 towards 0 like e^{-t}/2.
    """
    if not t >= 0:
        raise ParameterError("privacy parameter t must be >= 0")
    a = math.exp(-t)
    return a / (1.0 + a + math.sqrt(max(0.0, 1.0 - a * a)))


def strategy_label(g) -> str:
    if isinstance(g, SinePerturb):
        return f"sine(m={g.amplitude:g},w={g.frequency:g})"
    if isinstance(g, BoundaryFlip):
        return f"boundary_flip(p={g.flip_prob:g})"
    if isinstance(g, UniformFlip):
        return "uniform_flip(c=field)" if callable(g.c) else f"uniform_flip(c={g.c:g})"
    if isinstance(g, Bdpl):
        return f"bdpl(delta={g.delta:g},t={g.t:g})"
    if isinstance(g, Temperature):
        return f"temperature(T={g.T:g})"
    if isinstance(g, Substitute):
        return "substitute"
    return "identity"


# --------------------------------------------------------------------------
# deterministic scores
# --------------------------------------------------------------------------

def defended_score(server: Model, g, X) -> np.ndarray:
    """f_S^g(X) for deterministic strategies."""
    if getattr(g, "randomized", False):
        raise ParameterError(f"{strategy_label(g)} is randomised; query it through a DefenseOracle")
    X = np.atleast_2d(as_finite(X, "X"))
    if isinstance(g, Substitute):
        return g.model.raw(X)
    f = server.raw(X)
    if isinstance(g, SinePerturb):
        u = f if g.on == "score" else X[:, g.coord]
        return f + g.amplitude * np.sin(g.frequency * u)
    if isinstance(g, Temperature):
        return f / g.T
    return f


def defended_score_grad(server: Model, g, X) -> np.ndarray:
    """d f_S^g(x_i) / d x_i for deterministic strategies, shape (n, d)."""
    X = np.atleast_2d(as_finite(X, "X"))
    if isinstance(g, Substitute):
        return raw_grad_x(g.model, X)
    gf = raw_grad_x(server, X)
    if isinstance(g, SinePerturb):
        if g.on == "score":
            u = server.raw(X)
            return gf * (1.0 + g.amplitude * g.frequency * np.cos(g.frequency * u))[:, None]
        out = gf.copy()
        out[:, g.coord] += g.amplitude * g.frequency * np.cos(g.frequency * X[:, g.coord])
        return out
    if isinstance(g, Temperature):
        return gf / g.T
    if getattr(g, "randomized", False):
        raise ParameterError(f"{strategy_label(g)} is randomised and has no score gradient")
    return gf


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------

@dataclass(eq=False)
class DefenseOracle:
    """The server as the adversary sees it.

    The rng is consumed one uniform draw per queried point (randomised
    strategies only), so identical seeds and query sequences give identical
    answers.
    """

    server: Model
    strategy: object = field(default_factory=Identity)
    rng: np.random.Generator | None = None
    mode: str = "hard"

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ParameterError("oracle mode must be 'hard' or 'soft'")
        if getattr(self.strategy, "randomized", False) and self.rng is None:
            raise ParameterError("a randomised strategy needs an rng")

    def flip_signs(self, X) -> np.ndarray:
        """Realised B in {-1, +1} for each row (all +1 for deterministic strategies)."""
        g = self.strategy
        n = X.shape[0]
        if isinstance(g, Bdpl):
            g = g.as_boundary_flip()
        if isinstance(g, BoundaryFlip):
            u = self.rng.random(n)
            flip = g.region.contains(X, self.server) & (u < g.flip_prob)
        elif isinstance(g, UniformFlip):
            u = self.rng.random(n)
            flip = u < g.probs(X)
        else:
            return np.ones(n)
        return np.where(flip, -1.0, 1.0)

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(as_finite(X, "X"))
        if X.shape[1] != self.server.dim:
            raise DimensionError(f"oracle expects dimension {self.server.dim}, got {X.shape[1]}")
        if getattr(self.strategy, "randomized", False):
            return self.flip_signs(X) * self.server.raw(X)
        return defended_score(self.server, self.strategy, X)

    def respond(self, X) -> LabeledBatch:
        X = np.atleast_2d(as_finite(X, "X"))
        s = self.scores(X)
        if self.mode == "hard":
            return LabeledBatch(X, sign(s).astype(float), "hard")
        return LabeledBatch(X, sigmoid(s), "soft")


# --------------------------------------------------------------------------
# the disagreeing classifier f_B
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PiecewiseFlip:
    """f_B: equals -f_S inside the region and f_S elsewhere."""

    server: Model
    region: Region

    @property
    def dim(self):
        return self.server.dim

    def raw(self, X) -> np.ndarray:
        X = np.atleast_2d(as_finite(X, "X"))
        f = self.server.raw(X)
        return np.where(self.region.contains(X, self.server), -f, f)

    def hard(self, X) -> np.ndarray:
        # sign(-0) is +1 under the tie rule, so flip the label rather than the score
        X = np.atleast_2d(as_finite(X, "X"))
        h = self.server.hard(X)
        return np.where(self.region.contains(X, self.server), -h, h)


def construct_fB(server: Model, region: Region, require_mass: bool = False, sampler=None, rng=None, n: int = 100_000):
    """Classifier disagreeing with ``server`` exactly on ``region``.

    A zero-width band returns ``server`` itself.  With ``require_mass`` the
    region's mass under ``sampler`` is estimated and an empty region raises
    DegenerateRegionError.
    """
    if server.kind not in ("linear", "logistic"):
        raise ParameterError("construct_fB expects a linear server")
    if require_mass:
        if sampler is None or rng is None:
            raise ParameterError("require_mass needs a sampler and an rng")
        if region_mass(region, server, sampler, n, rng) == 0.0:
            raise DegenerateRegionError("region has zero estimated mass")
    if isinstance(region, BoundaryBand) and region.width == 0:
        return server
    return PiecewiseFlip(server, region)


# --------------------------------------------------------------------------
# catalog files
# --------------------------------------------------------------------------

def _region_to_dict(r) -> dict:
    if isinstance(r, BoundaryBand):
        return {"type": "boundary_band", "width": r.width}
    if isinstance(r, HalfspaceBand):
        return {"type": "halfspace_band", "direction": list(r.direction), "offset": r.offset, "width": r.width}
    raise ParameterError("explicit predicates cannot be serialised")


def _region_from_dict(d) -> Region:
    t = d.get("type")
    if t == "boundary_band":
        return BoundaryBand(float(d["width"]))
    if t == "halfspace_band":
        return HalfspaceBand(tuple(float(v) for v in d["direction"]), float(d["offset"]), float(d["width"]))
    raise ParameterError(f"unknown region type {t!r}")


def strategy_to_dict(g) -> dict:
    if isinstance(g, Identity):
        return {"type": "identity"}
    if isinstance(g, SinePerturb):
        return {"type": "sine", **asdict(g)}
    if isinstance(g, BoundaryFlip):
        return {"type": "boundary_flip", "region": _region_to_dict(g.region), "flip_prob": g.flip_prob}
    if isinstance(g, UniformFlip):
        if callable(g.c):
            raise ParameterError("a flip-probability field cannot be serialised")
        return {"type": "uniform_flip", "c": g.c}
    if isinstance(g, Bdpl):
        return {"type": "bdpl", "delta": g.delta, "t": g.t}
    if isinstance(g, Temperature):
        return {"type": "temperature", "T": g.T}
    raise ParameterError(f"cannot serialise {type(g).__name__}")


def strategies_from_dict(d) -> list:
    """One catalog entry; ``sine_grid`` expands amplitude-major."""
    t = d.get("type")
    if t == "identity":
        return [Identity()]
    if t == "sine":
        return [SinePerturb(float(d["amplitude"]), float(d["frequency"]), int(d.get("coord", 0)), d.get("on", "coord"))]
    if t == "sine_grid":
        return [
            SinePerturb(float(a), float(w), int(d.get("coord", 0)), d.get("on", "coord"))
            for a in d["amplitudes"] for w in d["frequencies"]
        ]
    if t == "boundary_flip":
        return [BoundaryFlip(_region_from_dict(d["region"]), float(d.get("flip_prob", 0.5)))]
    if t == "uniform_flip":
        return [UniformFlip(float(d["c"]))]
    if t == "bdpl":
        return [Bdpl(float(d["delta"]), float(d["t"]))]
    if t == "temperature":
        return [Temperature(float(d["T"]))]
    raise ParameterError(f"unknown strategy type {t!r}")


def load_catalog(path) -> list:
    doc = json.loads(Path(path).read_text())
    return parse_catalog(doc)


def parse_catalog(doc) -> list:
    if isinstance(doc, dict):
        if doc.get("format", CATALOG_FORMAT) != CATALOG_FORMAT:
            raise ParameterError("not a strategy catalog")
        entries = doc.get("strategies", [])
    else:
        entries = doc
    out = []
    for e in entries:
        out.extend(strategies_from_dict(e))
    if not out:
        raise ParameterError("strategy catalog is empty")
    return out


def save_catalog(strategies, path) -> None:
    doc = {
        "format": CATALOG_FORMAT,
        "version": CATALOG_VERSION,
        "strategies": [strategy_to_dict(g) for g in strategies],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
