"""Command-line entry point: ``abgame <subcommand> [options]``.

Exit codes: 0 success, 1 assertion failure (with --assert), 2 config
error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from ..io import atomic_write_csv, atomic_write_json, fmt
from .scenarios import DEFAULTS, boundary_concentration, gen_t1, load_config, resolve_config, t1_strategies

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

SUBCOMMAND_SCENARIOS = {
    "ab-curve": ("case1", "case2", "t2", "t3"),
    "optimize": ("t1", "t2"),
    "verify-theory": ("theory",),
}


def _config(args, allowed) -> dict:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = resolve_config({"scenario": args.scenario or allowed[0]})
    if cfg["scenario"] not in allowed:
        raise ConfigError(f"scenario {cfg['scenario']!r} does not fit this subcommand (expected one of {allowed})")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "reps", None) is not None:
        if "reps" not in cfg:
            raise ConfigError(f"scenario {cfg['scenario']} has no replications")
        if args.reps < 1:
            raise ConfigError("--reps must be at least 1")
        cfg["reps"] = args.reps
    return cfg


def _report(summary) -> int:
    for a in summary.assertions:
        print(f"[{'PASS' if a.passed else 'FAIL'}] {a.name}: {a.detail}")
    for e in summary.errors:
        print(f"[ERROR] replication {e['replication']}: {e['error']}: {e['message']}")
    print(f"artifacts in {summary.out_dir} (config hash {summary.config_hash[:12]})")
    return EXIT_OK if summary.passed else EXIT_ASSERT


def cmd_run(args, allowed) -> int:
    from .runner import run_scenario

    cfg = _config(args, allowed)
    summary = run_scenario(cfg, args.out, workers=args.workers)
    code = _report(summary)
    return code if args.assert_ else EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.kind == "t1":
        cfg = _config(args, ("t1",))
        data = gen_t1(cfg["seed"], cfg["n_queries"], cfg["test_size"])
        atomic_write_csv(out / "t1_test.csv", ["x1", "x2", "y"],
                         [[fmt(a), fmt(b), int(c)] for (a, b), c in zip(data.test_X, data.test_y)])
        atomic_write_csv(out / "t1_queries0.csv", ["x1", "x2"], [[fmt(a), fmt(b)] for a, b in data.x0])
        from ..defense import save_catalog

        save_catalog(data.strategies, out / "t1_strategies.json")
        print(f"wrote T1 data ({len(data.test_y)} test points, {len(data.strategies)} strategies) to {out}")
    else:
        from .idx import write_idx

        rng = np.random.default_rng(args.seed or 0)
        labels = np.array([2, 8, 5, 2, 8, 8], dtype=np.uint8)
        images = rng.integers(0, 256, size=(labels.size, 28, 28), dtype=np.uint8)
        write_idx(out / "fixture-images.idx3-ubyte", images)
        write_idx(out / "fixture-labels.idx1-ubyte", labels)
        print(f"wrote IDX fixture ({labels.size} images) to {out}")
    return EXIT_OK


def cmd_boundary_stats(args) -> int:
    from ..models import linear_model

    try:
        X = np.loadtxt(args.queries, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read queries from {args.queries}: {e}") from e
    strategies = t1_strategies()
    if not 1 <= args.strategy <= len(strategies):
        raise ConfigError(f"--strategy must be in 1..{len(strategies)}")
    if X.shape[1] != 2:
        raise DataError("boundary-stats expects two-dimensional T1 queries")
    server = linear_model([1.0, -1.0], 1.0)
    g = strategies[args.strategy - 1]
    frac = boundary_concentration(X, server, g, args.delta)
    base = np.random.default_rng(args.seed or 0).uniform(-10.0, 10.0, size=(max(X.shape[0], 10_000), 2))
    frac_u = boundary_concentration(base, server, g, args.delta)
    doc = {"strategy_index": args.strategy, "amplitude": g.amplitude, "frequency": g.frequency,
           "delta": args.delta, "fraction": frac, "uniform_baseline": frac_u, "n": int(X.shape[0])}
    print(json.dumps(doc))
    if args.out:
        atomic_write_json(Path(args.out) / "boundary_stats.json", doc)
    if args.assert_ and not frac > frac_u:
        return EXIT_ASSERT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abgame", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenarios=None):
        sp.add_argument("--config", help="JSON scenario config; omitted keys take defaults")
        if scenarios:
            sp.add_argument("--scenario", choices=scenarios, help="use this scenario's defaults when no --config")
        sp.add_argument("--seed", type=int, help="override the config's root seed")
        sp.add_argument("--out", default="abgame-out", help="artifact directory")
        sp.add_argument("--assert", dest="assert_", action="store_true", help="exit 1 when a check fails")

    g = sub.add_parser("gen-data", help="write T1 data files or a tiny IDX fixture")
    common(g, ("t1",))
    g.add_argument("--kind", choices=("t1", "idx-fixture"), default="t1")
    for name, scen in SUBCOMMAND_SCENARIOS.items():
        sp = sub.add_parser(name, help=f"run a {'/'.join(scen)} scenario")
        common(sp, scen)
        sp.add_argument("--reps", type=int, help="override the replication count")
        sp.add_argument("--workers", type=int, default=1, help="threads for replications")
    b = sub.add_parser("boundary-stats", help="band fraction of T1 queries around a defense boundary")
    common(b)
    b.add_argument("--queries", required=True, help="CSV of queries with a header row")
    b.add_argument("--strategy", type=int, default=42, help="1-based T1 strategy index")
    b.add_argument("--delta", type=float, default=DEFAULTS["t1"]["delta"])
    b.set_defaults(out=None)  # print only, unless an artifact directory is named
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "boundary-stats":
            return cmd_boundary_stats(args)
        return cmd_run(args, SUBCOMMAND_SCENARIOS[args.command])
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
