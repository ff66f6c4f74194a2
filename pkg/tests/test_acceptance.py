"""Acceptance criteria 1-9, one printed PASS/FAIL line each.

Tolerances are the pinned targets; nothing here is loosened to make a run pass.
"""
import time

import numpy as np
import pytest

from abgame.harness.runner import run_scenario
from abgame.harness.scenarios import resolve_config
from abgame import theory


def report(n, passed, detail, capsys):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def case_point(name, tmp_path):
    cfg = resolve_config({"scenario": name})
    s, secs = timed(run_scenario, cfg, tmp_path / name)
    return s.data["point"], cfg, secs


def test_criterion_1_case1(tmp_path, capsys):
    p, cfg, secs = case_point("case1", tmp_path)
    ok = abs(p.b - 0.86) <= 0.02 and abs(p.a - 0.92) <= 0.02 and cfg["reps"] == 50 and secs < 120
    report(1, ok, f"(b, a) = ({p.b:.4f}, {p.a:.4f}) stderr ({p.b_stderr:.4f}, {p.a_stderr:.4f}), "
                  f"target (0.86, 0.92) +- 0.02, {cfg['reps']} reps, {secs:.1f}s (< 120s)", capsys)


def test_criterion_2_case2(tmp_path, capsys):
    p, cfg, secs = case_point("case2", tmp_path)
    ok = abs(p.b - 0.98) <= 0.02 and abs(p.a - 0.90) <= 0.02
    report(2, ok, f"(b, a) = ({p.b:.4f}, {p.a:.4f}) stderr ({p.b_stderr:.4f}, {p.a_stderr:.4f}), "
                  f"target (0.98, 0.90) +- 0.02, {secs:.1f}s", capsys)


def test_criterion_3_uniform_flip(capsys):
    lo, t_lo = timed(theory.verify_uniform_flip, 0.3)
    hi, t_hi = timed(theory.verify_uniform_flip, 0.7)
    d_lo, d_hi = lo["estimate"]["disagreement"], hi["estimate"]["disagreement"]
    ok = d_lo <= 0.02 and d_hi >= 0.98 and t_lo < 60 and t_hi < 60
    report(3, ok, f"c=0.3 disagreement {d_lo:.4f} (<= 0.02, {t_lo:.1f}s); "
                  f"c=0.7 disagreement {d_hi:.4f} (>= 0.98, {t_hi:.1f}s)", capsys)


def test_criterion_4_risk_identity(capsys):
    pos = theory.verify_risk_identity(theory.make_scenario(0.1, 0.5, budget=100_000))
    neg = theory.verify_risk_identity(theory.make_scenario(0.1, 0.9, budget=100_000))
    e = pos["estimate"]
    ok = (abs(e["risk_S"] - 0.1) <= 0.003 and abs(e["risk_B"] - 0.1) <= 0.003 and abs(e["z"]) <= 3
          and not neg["passed"])
    report(4, ok, f"risk_S {e['risk_S']:.4f}, risk_B {e['risk_B']:.4f} (0.1 +- 0.003), z {e['z']:.2f} (|z| <= 3); "
                  f"p=0.9 control risk_S {neg['estimate']['risk_S']:.4f} "
                  f"risk_B {neg['estimate']['risk_B']:.4f} -> {'rejected' if not neg['passed'] else 'ACCEPTED'}",
           capsys)


def test_criterion_5_equilibrium(capsys):
    p = theory.equilibrium_point(theory.make_scenario(0.2))
    trend, secs = timed(theory.bdpl_equilibrium_trend, [1000, 10000, 20000], seeds=10)
    eq_ok = abs(p.b - 0.8) <= 0.01 and abs(p.a - 0.8) <= 0.01
    ok = eq_ok and trend.monotone
    gaps = ", ".join(f"{g:.4f}" for g in trend.median_gaps)
    report(5, ok, f"equilibrium (b, a) = ({p.b:.4f}, {p.a:.4f}) target (0.8, 0.8) +- 0.01; "
                  f"BDPL median |a-b| over n=[1000, 10000, 20000]: [{gaps}] "
                  f"{'non-increasing' if trend.monotone else 'INCREASES'} ({secs:.1f}s)", capsys)


@pytest.fixture(scope="module")
def t1_run(tmp_path_factory):
    cfg = resolve_config({"scenario": "t1"})
    s, secs = timed(run_scenario, cfg, tmp_path_factory.mktemp("t1"))
    return s, cfg, secs


def test_criterion_6_algorithm_t1(t1_run, capsys):
    s, cfg, secs = t1_run
    checks = {a.name: a for a in s.assertions}
    ok = (not s.errors and cfg["reps"] == 20 and checks["t1_loss_non_increasing"].passed
          and checks["t1_loss_plateau"].passed and checks["t1_lambda_one_hot"].passed
          and checks["t1_winner"].passed and secs < 600)
    parts = "; ".join(f"{n}: {'ok' if checks[n].passed else 'FAILS'} ({checks[n].detail})"
                      for n in ("t1_loss_non_increasing", "t1_loss_plateau", "t1_lambda_one_hot", "t1_winner"))
    report(6, ok, f"{parts}; {len(s.errors)} aborted replications; {secs:.1f}s (< 600s)", capsys)


def test_criterion_7_boundary_concentration(t1_run, capsys):
    s, cfg, _ = t1_run
    conc = s.data["concentration"]
    wins = sum(1 for a, b in conc if a > b)
    med_opt = float(np.median([a for a, _ in conc]))
    med_uni = float(np.median([b for _, b in conc]))
    ok = wins >= 15 and len(conc) == 20
    report(7, ok, f"{wins}/{len(conc)} seeds beat the uniform baseline (>= 15); median band fraction "
                  f"{med_opt:.3f} optimized vs {med_uni:.3f} uniform, delta {cfg['delta']}", capsys)


def test_criterion_8_t2_ab_points(tmp_path, capsys):
    cfg = resolve_config({"scenario": "t2"})
    s, secs = timed(run_scenario, cfg, tmp_path / "t2")
    frac = s.data["above_fraction"]
    ok = frac >= 0.8 and not s.errors
    report(8, ok, f"{frac:.0%} of plotted AB points have a > b (>= 80%); {len(s.errors)} aborted; {secs:.1f}s",
           capsys)


def test_criterion_9_numerical_properties(capsys):
    from conftest import central_diff, rel_err
    from test_bilevel import H_of_x, analytic_hypergrad, quad_instance
    from test_models import random_instance

    from abgame.bilevel import run
    from abgame.metrics import adversary_utility, server_utility, ScaledL2, ThresholdedProbDist, CrossEntropy
    from abgame.models import cross_hvp_xbeta, grad_beta, grad_x, hvp_beta, objective, init_model
    from abgame.numeric import neumann_inverse_apply, project_simplex
    from test_bilevel import t1_config

    out = {}
    # hypergradient through the closed-form ridge solution map
    worst = 0.0
    for seed in range(20):
        inst = quad_instance(seed)
        X = inst[0]
        fd = np.zeros_like(X)
        for i in np.ndindex(X.shape):
            e = np.zeros_like(X)
            e[i] = 1e-6
            fd[i] = (H_of_x(X + e, *inst[1:]) - H_of_x(X - e, *inst[1:])) / 2e-6
        worst = max(worst, rel_err(analytic_hypergrad(*inst), fd))
    out["hypergrad"] = (worst <= 1e-3, f"hypergrad rel err {worst:.1e}")

    # every analytic derivative on 100 random instances
    worst = 0.0
    for i in range(100):
        m, X, t, loss, rng = random_instance(i)
        v = rng.normal(size=m.n_params)
        worst = max(
            worst,
            rel_err(grad_beta(m, X, loss, t, 0.05), central_diff(lambda b: objective(m.with_beta(b), X, loss, t, 0.05), m.beta)),
            rel_err(grad_x(m, X, loss, t), central_diff(lambda Z: objective(m, Z, loss, t), X)),
            rel_err(hvp_beta(m, X, loss, t, v, 0.05),
                    central_diff(lambda b: grad_beta(m.with_beta(b), X, loss, t, 0.05) @ v, m.beta)),
            rel_err(cross_hvp_xbeta(m, X, loss, t, v), central_diff(lambda Z: grad_beta(m, Z, loss, t) @ v, X)),
        )
    out["fd"] = (worst <= 1e-5, f"gradient/HVP rel err {worst:.1e}")

    # simplex projection against a brute-force grid on the 2-simplex
    rng = np.random.default_rng(0)
    s = np.linspace(0, 1, 10_001)
    seg = np.column_stack([s, 1 - s])
    worst = max(np.abs(project_simplex(v) - seg[np.argmin(((seg - v) ** 2).sum(1))]).max()
                for v in rng.normal(scale=3, size=(200, 2)))
    out["simplex"] = (worst <= 1e-3, f"simplex vs grid {worst:.1e}")

    # Neumann series against a dense solve
    worst = 0.0
    for p in (2, 5, 10):
        Qm, _ = np.linalg.qr(rng.normal(size=(p, p)))
        H = Qm @ np.diag(np.linspace(1, 20, p)) @ Qm.T
        v = rng.normal(size=p)
        exact = np.linalg.solve(H, v)
        approx = neumann_inverse_apply(lambda x: H @ x, v, 4000, 1 / np.trace(H))
        worst = max(worst, np.linalg.norm(approx - exact) / np.linalg.norm(exact))
    out["neumann"] = (worst <= 1e-3, f"Neumann vs dense {worst:.1e}")

    # utilities stay in [0, 1]
    inside = True
    for k in range(200):
        r = np.random.default_rng(k)
        f_S, f_A = init_model("mlp2", 2, r, hidden=3), init_model("logistic", 2, r)
        T = r.normal(size=(100, 2)) * 4
        y = r.choice([-1.0, 1.0], 50)
        z = np.where(r.random(50) < r.random(), -y, y)
        us = [server_utility(y, z)] + [adversary_utility(f_A, f_S, T, L) for L in
                                       (None, CrossEntropy(), ScaledL2(), ThresholdedProbDist(0.1))]
        inside &= all(0.0 <= u <= 1.0 for u in us)
    out["utilities"] = (inside, "utilities in [0, 1]" if inside else "utility LEFT [0, 1]")

    # bit-exact replay
    a, b = run(t1_config(K=6)), run(t1_config(K=6))
    same = np.array_equal(a.x_last, b.x_last) and np.array_equal(a.lam, b.lam) and a.trace.H == b.trace.H
    out["replay"] = (same, "bit-exact replay" if same else "replay DIFFERS")

    ok = all(v[0] for v in out.values())
    report(9, ok, "; ".join(v[1] for v in out.values()), capsys)
