"""Command line entry point: run, sweep, aggregate, diagnose."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ChurnLabError, ConfigurationError
from .harness import (SUMMARY_COLUMNS, RunConfig, aggregate, emit_csv, find_runs, read_csv,
                      run_experiment)
from .ntk import offdiag_stats, srank

log = logging.getLogger("churnlab")


def max_workers() -> int:
    raw = os.environ.get("CHURNLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"CHURNLAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError("CHURNLAB_THREADS must be >= 1")
    return n


def parse_seed_range(text: str) -> list:
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    if not m:
        raise ConfigurationError(f"seed range must look like 'a..b', got {text!r}")
    a, b = int(m.group(1)), int(m.group(2))
    if b < a:
        raise ConfigurationError(f"empty seed range {text!r}")
    return list(range(a, b + 1))


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(config, seed=seed)


def _run_one(args):
    config, out = args
    run_experiment(config, out)
    return str(out)


def cmd_run(ns) -> int:
    config = RunConfig.from_json(ns.config)
    if ns.seed is not None:
        config = _with_seed(config, ns.seed)
    run_experiment(config, ns.out)
    print(ns.out)
    return 0


def cmd_sweep(ns) -> int:
    base = RunConfig.from_json(ns.config)
    jobs = [(_with_seed(base, s), Path(ns.out) / f"seed_{s}") for s in parse_seed_range(ns.seeds)]
    workers = min(max_workers(), len(jobs))
    if workers == 1:
        for job in jobs:
            print(_run_one(job), flush=True)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for done in pool.map(_run_one, jobs):
                print(done, flush=True)
    return 0


def cmd_aggregate(ns) -> int:
    runs = find_runs(ns.inputs)
    if not runs:
        raise ConfigurationError("no run directories (with manifest.json) found")
    summary = aggregate(runs)
    emit_csv(summary, ns.out, SUMMARY_COLUMNS)
    for row in summary:
        print(", ".join(f"{c}={row[c]:.4g}" if isinstance(row[c], float) else f"{c}={row[c]}"
                        for c in SUMMARY_COLUMNS))
    return 0


def cmd_diagnose(ns) -> int:
    """Recompute NTK statistics from dumped matrices and compare with metrics.csv."""
    run = Path(ns.input)
    dumps = sorted(run.glob("ntk_iter*.csv"), key=lambda p: int(re.search(r"(\d+)", p.stem).group(1)))
    if not dumps:
        print(f"no NTK dumps in {run}", file=sys.stderr)
        return 1
    recorded = {}
    metrics = run / "metrics.csv"
    if metrics.exists():
        rows = [r for r in read_csv(metrics) if r.get("srank") is not None]
        recorded = {i: r for i, r in enumerate(rows)}
    print("iteration,srank,offdiag_abs_sum,diag_abs_sum,recorded_srank")
    mismatches = 0
    for i, path in enumerate(dumps):
        N = np.loadtxt(path, delimiter=",", ndmin=2)
        off, diag = offdiag_stats(N)
        r = srank(N, ns.delta)
        rec = recorded.get(i, {}).get("srank")
        if rec is not None and ns.delta == 0.01 and int(rec) != r:
            mismatches += 1
        iteration = int(re.search(r"(\d+)", path.stem).group(1))
        print(f"{iteration},{r},{off:.10g},{diag:.10g},{'' if rec is None else rec}")
    if mismatches:
        print(f"{mismatches} srank value(s) differ from metrics.csv", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="churnlab", description="Continual RL churn-reduction experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one configuration over a seed range")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", required=True, help="inclusive range a..b")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("aggregate", help="summarize run directories into summary.csv")
    a.add_argument("--in", dest="inputs", nargs="+", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_aggregate)

    d = sub.add_parser("diagnose", help="recompute NTK statistics from dumped matrices")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--delta", type=float, default=0.01)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except ChurnLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
