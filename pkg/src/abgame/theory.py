"""Monte Carlo checks of the game's theoretical claims.

* Flipping labels with probability 1/2 on a region of mass 2*eps makes the
  server model f_S and the region-flipped model f_B equally good risk
  minimisers: both have risk eps against the defended responses.
* An adversary that breaks that tie with a fair coin lands on (1-eps, 1-eps).
* Flipping every label with a constant probability c is harmless for c < 1/2
  and fully inverts the extracted model for c > 1/2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attack import HalfplaneERM, LowerLevelProblem, NearestNeighbor
from .defense import Bdpl, BoundaryBand, BoundaryFlip, DefenseOracle, UniformFlip, boundary_distance, construct_fB
from .errors import DegenerateRegionError, ParameterError
from .metrics import (
    ABPoint,
    ExtractionScenario,
    adversary_utility,
    extraction_trial,
    replicate,
    server_utility,
    summarize,
)
from .models import Model, linear_model
from .numeric import make_rng

MASS_TOL = 0.01


@dataclass(frozen=True)
class BoxQ:
    """Uniform distribution on [lo, hi]^dim."""

    dim: int
    lo: float = -1.0
    hi: float = 1.0

    def __call__(self, n, rng):
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


def calibrate_band(server: Model, sampler, mass: float, rng, n: int = 1_000_000, iters: int = 60) -> tuple:
    """Band half-width whose Monte Carlo mass is ``mass``, by bisection.

    Returns ``(width, estimated_mass)``.
    """
    if not 0.0 <= mass < 1.0:
        raise ParameterError("band mass must lie in [0, 1)")
    dist = boundary_distance(server, sampler(n, rng))
    if mass == 0.0:
        return 0.0, 0.0
    lo, hi = 0.0, float(dist.max())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.mean(dist <= mid) < mass:
            lo = mid
        else:
            hi = mid
    return hi, float(np.mean(dist <= hi))


@dataclass(frozen=True, eq=False)
class EquilibriumScenario:
    """Linear server, a boundary band of mass 2*eps and the flipping oracle."""

    eps: float
    server: Model
    sampler: BoxQ
    width: float
    mass: float
    flip_prob: float = 0.5
    budget: int = 100_000
    seed: int = 0

    @property
    def region(self) -> BoundaryBand:
        return BoundaryBand(self.width)

    @property
    def strategy(self) -> BoundaryFlip:
        return BoundaryFlip(self.region, self.flip_prob)

    @property
    def f_B(self):
        return construct_fB(self.server, self.region)


def make_scenario(eps: float, flip_prob: float = 0.5, dim: int = 2, budget: int = 100_000, seed: int = 0,
                  server: Model | None = None, sampler: BoxQ | None = None,
                  calib_budget: int = 1_000_000) -> EquilibriumScenario:
    if not 0.0 <= eps < 0.5:
        raise ParameterError("eps must lie in [0, 0.5)")
    if budget < 1:
        raise ParameterError("budget must be positive")
    server = server or linear_model(np.ones(dim) / math.sqrt(dim), 0.0)
    sampler = sampler or BoxQ(server.dim)
    width, mass = calibrate_band(server, sampler, 2 * eps, make_rng(seed, "calibrate"), calib_budget)
    if abs(mass - 2 * eps) > MASS_TOL:
        raise DegenerateRegionError(f"calibrated band mass {mass:.4f} is not within {MASS_TOL} of {2 * eps}")
    return EquilibriumScenario(eps, server, sampler, width, mass, flip_prob, budget, seed)


def _report(claim, estimate, tolerance, passed, scen_seed, budget, stderr, **extra) -> dict:
    out = {
        "claim": claim,
        "estimate": estimate,
        "tolerance": tolerance,
        "passed": bool(passed),
        "seed": int(scen_seed),
        "budget": int(budget),
        "stderr": stderr,
    }
    out.update(extra)
    return out


def _binom_se(p, n):
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def verify_risk_identity(scen: EquilibriumScenario, tol: float = 0.003) -> dict:
    """Risks of f_S and f_B against the oracle's responses, both ~ eps."""
    n = scen.budget
    worst = 3.0 * _binom_se(min(max(scen.eps, 1e-12), 0.5), n)
    if worst > tol:
        raise ParameterError(f"budget {n} gives 3-sigma {worst:.4f} > tolerance {tol}; raise the budget")
    rng_x = make_rng(scen.seed, "identity", "x")
    rng_o = make_rng(scen.seed, "identity", "oracle")
    X = scen.sampler(n, rng_x)
    y = DefenseOracle(scen.server, scen.strategy, rng_o).respond(X).y
    risk_S = float(np.mean(y != scen.server.hard(X)))
    risk_B = float(np.mean(y != scen.f_B.hard(X)))
    se_S, se_B = _binom_se(risk_S, n), _binom_se(risk_B, n)
    se_diff = math.sqrt(se_S ** 2 + se_B ** 2)
    diff = risk_S - risk_B
    z = diff / se_diff if se_diff > 0 else 0.0
    risks_ok = abs(risk_S - scen.eps) <= tol and abs(risk_B - scen.eps) <= tol
    same_ok = abs(z) <= 3.0
    return _report(
        "risk_identity",
        {"risk_S": risk_S, "risk_B": risk_B, "diff": diff, "z": z},
        {"risk": tol, "z": 3.0},
        risks_ok and same_ok,
        scen.seed, n,
        {"risk_S": se_S, "risk_B": se_B, "diff": se_diff},
        eps=scen.eps, flip_prob=scen.flip_prob, band_mass=scen.mass,
        risks_ok=risks_ok, indistinguishable=same_ok,
    )


def equilibrium_point(scen: EquilibriumScenario, coin_reps: int = 100_000) -> ABPoint:
    """(b, a) when the adversary picks f_S or f_B by a fair coin."""
    n = scen.budget
    X = scen.sampler(n, make_rng(scen.seed, "equilibrium", "x"))
    y = DefenseOracle(scen.server, scen.strategy, make_rng(scen.seed, "equilibrium", "oracle")).respond(X).y
    agree = (y == scen.server.hard(X)).astype(np.float64)
    T = scen.sampler(n, make_rng(scen.seed, "equilibrium", "test"))
    a_S = adversary_utility(scen.server, scen.server, T)
    a_B = adversary_utility(scen.f_B, scen.server, T)
    coin = make_rng(scen.seed, "equilibrium", "coin").random(coin_reps) < 0.5
    a = np.where(coin, a_S, a_B)
    b = float(agree.mean())
    return ABPoint(f"equilibrium(eps={scen.eps:g})", f"boundary_flip(p={scen.flip_prob:g})",
                   b, float(agree.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                   float(a.mean()), float(a.std(ddof=1) / math.sqrt(coin_reps)) if coin_reps > 1 else 0.0,
                   coin_reps, n)


def verify_uniform_flip(c: float, n_queries: int = 5000, dim: int = 2, test_size: int = 100_000,
                        seed: int = 0, server: Model | None = None, tol: float = 0.02,
                        adversary=None) -> dict:
    """Extract under uniform flipping and report the disagreement with f_S.

    The default adversary minimises empirical 0-1 risk over halfplanes
    (two dimensions); pass a LowerLevelProblem to use a surrogate loss.
    """
    if c == 0.5:
        raise ParameterError("c = 0.5 makes every response a fair coin; there is no signal to test")
    if not 0.0 <= c <= 1.0:
        raise ParameterError("c must be a probability")
    server = server or linear_model(np.r_[1.0, -np.ones(dim - 1)] / math.sqrt(dim), 0.0)
    Q = BoxQ(server.dim)
    scen = ExtractionScenario(server, Q, n_queries, Q, test_size)
    if adversary is None:
        adversary = HalfplaneERM() if server.dim == 2 else LowerLevelProblem(solver="newton", tol=1e-8)
    b, a = extraction_trial(scen, UniformFlip(c), adversary, make_rng(seed, "uniform_flip", repr(c)))
    dis = 1.0 - a
    passed = dis <= tol if c < 0.5 else dis >= 1.0 - tol
    return _report("uniform_flip", {"disagreement": dis, "server_utility": b}, tol, passed, seed, n_queries,
                   _binom_se(dis, test_size), c=c, test_size=test_size)


@dataclass
class TrendReport:
    sizes: list
    points: list
    median_gaps: list
    gaps: list = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        g = self.median_gaps
        return all(g[i + 1] <= g[i] for i in range(len(g) - 1))

    def to_dict(self) -> dict:
        return {"claim": "bdpl_trend", "sizes": self.sizes, "median_gaps": self.median_gaps,
                "passed": self.monotone, "points": [p.__dict__ for p in self.points]}


def bdpl_equilibrium_trend(sizes, eps: float = 0.2, t: float = 0.01, dim: int = 10, seeds: int = 10,
                           test_size: int = 20_000, seed: int = 0, adversary=None, strategy=None) -> TrendReport:
    """AB points under BDPL as the query budget grows.

    The band is calibrated to mass 2*eps under Q = U[-1, 1]^dim.  The default
    adversary is the interpolating nearest-neighbour learner.
    """
    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ParameterError("query sizes must be strictly increasing")
    if seeds < 1:
        raise ParameterError("need at least one seed")
    server = linear_model(np.ones(dim) / math.sqrt(dim), 0.0)
    Q = BoxQ(dim)
    width, _ = calibrate_band(server, Q, 2 * eps, make_rng(seed, "calibrate"))
    strategy = strategy if strategy is not None else Bdpl(width, t)
    adversary = adversary or NearestNeighbor()
    points, medians, gaps = [], [], []
    for n in sizes:
        scen = ExtractionScenario(server, Q, n, Q, test_size)
        samples = replicate(lambda r: extraction_trial(scen, strategy, adversary, r), seeds, seed, key=f"bdpl-{n}")
        s = np.asarray(samples)
        g = np.abs(s[:, 1] - s[:, 0])
        points.append(summarize(f"n={n}", repr(strategy), samples, test_size))
        gaps.append(g.tolist())
        medians.append(float(np.median(g)))
    return TrendReport(sizes, points, medians, gaps)
