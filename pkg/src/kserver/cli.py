"""Command-line interface.

    kserver simulate --metric line --n 64 --k 4 --T 2000 --replicas 32 \
        --tau 12 --seed 7 --adversary circle_sweep --out run.jsonl
    kserver opt --metric line --n 16 --k 2 --requests 0,5,9,0
    kserver verify
    kserver distort --metric line --n 64 --trials 200
    kserver report --run run.jsonl

All flags have config-file equivalents via --config run.json; the
KSERVER_LOG environment variable sets the verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import random
import sys

from .harness import ExperimentConfig, run
from .metric import build_metric
from .offline import offline_opt_mcf

log = logging.getLogger("kserver")


def _setup_logging():
    level = os.environ.get("KSERVER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _add_metric_args(sp, defaults=True):
    kinds = ["line", "circle", "uniform", "expander", "random"]
    sp.add_argument("--metric", default="line" if defaults else None, choices=kinds)
    sp.add_argument("--n", type=int, default=64 if defaults else None)
    sp.add_argument("--degree", type=int, default=4 if defaults else None)


def _config_from_args(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    cfg = ExperimentConfig.from_json_obj(base)
    mapping = {
        "metric": "metric", "n": "n", "k": "k", "T": "horizon", "replicas": "replicas",
        "tau": "tau", "adversary": "adversary", "out": "out", "x0": "x0",
        "degree": "degree", "ledger_replicas": "ledger_replicas",
    }
    for arg_name, cfg_name in mapping.items():
        val = getattr(args, arg_name, None)
        if val is not None:
            setattr(cfg, cfg_name, val)
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg.seed_hst, cfg.seed_del = s * 4 + 1, s * 4 + 2
        cfg.seed_rounding, cfg.seed_adversary = s * 4 + 3, s * 4 + 4
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    report = run(cfg)
    summary = report.summary_obj()
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_opt(args) -> int:
    m = build_metric(args.metric, args.n, seed=args.seed or 0, degree=args.degree)
    if args.requests:
        requests = [int(x) for x in args.requests.split(",")]
    else:
        rng = random.Random(args.seed or 0)
        requests = [rng.randrange(args.n) for _ in range(args.T or 16)]
    initial = [args.x0 or 0] * args.k if args.stacked else sorted(
        m.points, key=lambda y: (m.d(args.x0 or 0, y), y)
    )[: args.k]
    cost, trajectory = offline_opt_mcf(m, requests, args.k, initial)
    out = {"cost": cost, "requests": requests, "initial": initial}
    if args.trajectory:
        out["trajectory"] = [{str(x): c for x, c in step.items()} for step in trajectory]
    print(json.dumps(out, indent=2))
    return 0


def cmd_verify(args) -> int:
    from .verify import run_battery

    results = run_battery(seed=args.seed or 0)
    ok = True
    for name, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return 0 if ok else 1


def cmd_distort(args) -> int:
    """Static embedding distortion: carve every level over all points
    with truncated-exponential radii and report the stretch statistics
    of the resulting tree metric."""
    from .hst import Tree
    from .partition import CarveSpec, SemiPartition, carve, embed_all, sample_trunc_exp

    m = build_metric(args.metric, args.n, seed=args.seed or 0, degree=args.degree)
    tree_probe = Tree(m, args.tau)
    rng = random.Random(args.seed or 0)
    ratios = []
    for _ in range(args.trials):
        t = Tree(m, args.tau)
        qs = []
        for j in range(1, t.depth + 1):
            order = list(m.points)
            rng.shuffle(order)
            radii = {
                c: args.tau ** (-j - 1) + sample_trunc_exp(j + 1, max(2.0, float(m.n)), args.tau, rng)
                for c in order
            }
            qs.append(carve(CarveSpec(tuple(order), radii), m))
        emb = embed_all(t, qs)
        pairs = 0
        for x in m.points:
            for y in m.points:
                if x < y and (pairs := pairs + 1) and pairs <= args.pairs:
                    d_hst = t.dist(emb[x][0], emb[y][0])
                    ratios.append(d_hst / m.d(x, y))
    out = {
        "depth": tree_probe.depth,
        "trials": args.trials,
        "expansion_mean": sum(ratios) / len(ratios),
        "expansion_max": max(ratios),
        "expansion_min": min(ratios),
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_report(args) -> int:
    from .report import render_run_figures

    stem = args.run[:-6] if args.run.endswith(".jsonl") else args.run
    made = render_run_figures(stem, out_dir=args.out_dir)
    for path in made:
        print(path)
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="kserver", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="run the full pipeline")
    _add_metric_args(sp, defaults=False)
    sp.add_argument("--k", type=int)
    sp.add_argument("--T", type=int)
    sp.add_argument("--replicas", type=int)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--adversary", default=None,
                    choices=["circle_sweep", "paging_cruel", "random", "trace"])
    sp.add_argument("--x0", type=int)
    sp.add_argument("--ledger-replicas", dest="ledger_replicas", type=int)
    sp.add_argument("--out")
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("opt", help="offline optimum oracle only")
    _add_metric_args(sp)
    sp.add_argument("--k", type=int, default=2)
    sp.add_argument("--T", type=int)
    sp.add_argument("--requests", help="comma-separated point ids")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--x0", type=int)
    sp.add_argument("--stacked", action="store_true",
                    help="start all servers at x0 instead of the k nearest points")
    sp.add_argument("--trajectory", action="store_true")
    sp.set_defaults(func=cmd_opt)

    sp = sub.add_parser("verify", help="run the invariant battery")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("distort", help="static embedding distortion statistics")
    _add_metric_args(sp)
    sp.add_argument("--tau", type=float, default=12.0)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--pairs", type=int, default=2000)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_distort)

    sp = sub.add_parser("report", help="render figures for a finished run")
    sp.add_argument("--run", required=True, help="the run's .jsonl path")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
