"""Command-line entry point: ``npsc run``, ``npsc illcond`` and ``npsc precond-table``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiments import (
    PROBLEM_IDS,
    ExperimentConfig,
    illcond_demo,
    precond_table,
    run,
    write_csv,
)
from .trainers import ALGORITHMS

RUN_DEFAULTS = {"problem": "ex1", "algo": "npsc", "neurons": 32, "epochs": 1000, "seeds": 1,
                "master_seed": 0, "quad_points": None, "precond": "full", "out": None,
                "workers": 1, "timing": False}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npsc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train a network on a benchmark problem")
    r.add_argument("--config", type=Path, help="JSON file with any of the flags below")
    r.add_argument("--problem", choices=[x for x in PROBLEM_IDS if x != "illcond"])
    r.add_argument("--algo", choices=ALGORITHMS)
    r.add_argument("--neurons", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--seeds", type=int)
    r.add_argument("--master-seed", dest="master_seed", type=int)
    r.add_argument("--quad-points", dest="quad_points", type=int)
    r.add_argument("--precond", choices=("full", "diag", "none"))
    r.add_argument("--workers", type=int)
    r.add_argument("--timing", action="store_true", default=None,
                   help="fill the wall_ms column (makes output machine dependent)")
    r.add_argument("--out", help="output path; writes <stem>_seed<k>.csv and <stem>_mean.csv")

    i = sub.add_parser("illcond", help="GD/Adam on the fixed-node a-problem")
    i.add_argument("--neurons", type=int, default=32)
    i.add_argument("--iters", type=int, default=10000)
    i.add_argument("--out", required=True)

    t = sub.add_parser("precond-table", help="iteration counts for the fixed-node a-problem")
    t.add_argument("--problem", choices=("ex2", "ex3"), required=True)
    t.add_argument("--max-iter", dest="max_iter", type=int, default=500000,
                   help="cap for GD and Adam (0 skips them)")
    t.add_argument("--out", required=True)
    return p


def _run_config(args) -> ExperimentConfig:
    values = dict(RUN_DEFAULTS)
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SystemExit(f"cannot read config {args.config}: {exc}")
        unknown = set(loaded) - set(values)
        if unknown:
            raise SystemExit(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(loaded)
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return ExperimentConfig(**values)


def _cmd_run(args) -> int:
    config = _run_config(args)
    records, agg = run(config)
    for rec in records:
        last = rec.final
        print(f"seed {rec.seed}: rel_energy_err={last['rel_energy_err']:.3e} "
              f"l2_err={last['l2_err']:.3e} rejected_epochs={rec.accepted_false}")
    last = agg[-1]
    print(f"mean: rel_energy_err={last['rel_energy_err_mean']:.3e} l2_err={last['l2_err_mean']:.3e}")
    return 0


def _cmd_illcond(args) -> int:
    res = illcond_demo(args.neurons, args.iters)
    rows = [{"iteration": k + 1, "gd_rel_err": g, "adam_rel_err": a}
            for k, (g, a) in enumerate(zip(res["gd"], res["adam"]))]
    path = write_csv(args.out, rows, ("iteration", "gd_rel_err", "adam_rel_err"))
    summary = path.with_name(path.stem + "_summary.csv")
    write_csv(summary, [{"n": args.neurons, "kappa": res["kappa"], "tau": res["tau"]}],
              ("n", "kappa", "tau"))
    print(f"kappa(M) = {res['kappa']:.4e}; GD final rel. error {res['gd'][-1]:.3e}, "
          f"Adam {res['adam'][-1]:.3e}")
    return 0


def _cmd_table(args) -> int:
    rows = precond_table(args.problem, first_order_max_iter=args.max_iter)
    cap = f">{args.max_iter}" if args.max_iter > 0 else "skipped"
    out = [{k: (cap if v is None and k in ("gd", "adam") else ("" if v is None else v))
            for k, v in row.items()} for row in rows]
    write_csv(args.out, out, ("n", "gd", "adam", "cg", "pcg"))
    for row in out:
        print("  ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    np.seterr(over="ignore", under="ignore")
    try:
        return {"run": _cmd_run, "illcond": _cmd_illcond, "precond-table": _cmd_table}[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
