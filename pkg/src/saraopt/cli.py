"""Command-line front end.

Subcommands:
    run           execute a configured experiment (TOML or JSON config)
    compare       align run summaries side by side
    diff          spectrum of the weight change between two checkpoints
    verify-lemma  Monte-Carlo check of the projection-error bound
    schedule      closed-form (beta1, tau, eta) from the convergence analysis

Exits 0 on success; on failure prints a machine-readable error JSON to stderr
and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import harness, matcore, theory
from .matcore import RngStream
from .subspace import SelectorKind


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saraopt", description=__doc__)
    parser.add_argument("--deterministic", action="store_true",
                        help="force sequential reduction order in matrix products")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment")
    p_run.add_argument("--config", required=True, help="TOML or JSON run configuration")

    p_cmp = sub.add_parser("compare", help="compare run summaries")
    p_cmp.add_argument("summaries", nargs="+", help="summary.json paths")
    p_cmp.add_argument("--csv", default=None, help="also write the comparison CSV here")

    p_diff = sub.add_parser("diff", help="checkpoint weight-difference spectrum")
    p_diff.add_argument("--run", required=True, dest="run_dir")
    p_diff.add_argument("--from", required=True, type=int, dest="step_a")
    p_diff.add_argument("--to", required=True, type=int, dest="step_b")

    p_ver = sub.add_parser("verify-lemma", help="verify the projection-error bound")
    p_ver.add_argument("--m", required=True, type=int)
    p_ver.add_argument("--n", required=True, type=int)
    p_ver.add_argument("--r", required=True, type=int)
    p_ver.add_argument("--trials", required=True, type=int)

    p_sched = sub.add_parser("schedule", help="emit the convergence-analysis schedule")
    p_sched.add_argument("--L", required=True, type=float)
    p_sched.add_argument("--delta", required=True, type=float)
    p_sched.add_argument("--sigma-sq", required=True, type=float)
    p_sched.add_argument("--Delta", required=True, type=float, dest="Delta")
    p_sched.add_argument("--T", required=True, type=int)
    return parser


def _cmd_run(args) -> int:
    config = harness.load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["master_seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.deterministic:
        updates["deterministic"] = True
    if updates:
        config = dataclasses.replace(config, **updates)
    summary = harness.run_experiment(config)
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


def _cmd_compare(args) -> int:
    _, csv_text, table_text = harness.compare_runs(args.summaries)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(csv_text)
    print(table_text, end="")
    return 0


def _cmd_diff(args) -> int:
    reports = harness.checkpoint_diff(args.run_dir, args.step_a, args.step_b)
    for rep in reports:
        print(f"{rep.layer}: stable_rank={rep.stable_rank:.4f}")
    return 0


def _cmd_verify_lemma(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = RngStream(seed)
    g = matcore.gaussian_matrix(rng.child("gradient"), args.m, args.n)
    reports = []
    for kind in ("sara", "random"):
        selector = SelectorKind(kind, args.r, 1)
        reports.append(
            theory.verify_projection_bound(selector, g, args.trials, rng.child(kind))
        )
    print(theory.bound_report_json(reports))
    return 0 if all(r.passed for r in reports) else 1


def _cmd_schedule(args) -> int:
    params = theory.TheoryParams(
        L=args.L, Delta=args.Delta, sigma_sq=args.sigma_sq, delta=args.delta, T=args.T
    )
    schedule = theory.convergence_schedule(params)
    print(theory.schedule_report_json(params, schedule))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.deterministic:
        matcore.set_deterministic(True)
    handlers = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "diff": _cmd_diff,
        "verify-lemma": _cmd_verify_lemma,
        "schedule": _cmd_schedule,
    }
    try:
        return handlers[args.command](args)
    except Exception as e:  # surface a machine-readable failure
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
