"""Command-line entry point.

Subcommands: run, split, linkbudget, bounds, compare.  Exit codes: 0 on
success, 2 on configuration errors, 3 on runtime errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import numpy as np

from . import analysis, channel, checkpoint, experiment
from .analysis import BoundParams
from .config import ConfigError, load_config, validate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    warnings = validate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = experiment.build(cfg)
    run = experiment.make_run(setup)
    result = run.run()
    experiment.annotate_grad_variance(result, setup.datasets)
    scheme = cfg.train.scheme
    (out / "metrics.csv").write_text(experiment.metrics_csv(result, scheme))
    setup.assignment.export(out / "assignment.txt")
    channel.export_contact_plan(setup.plan, cfg.link.window_seconds,
                                setup.rate_bps, out / "contactplan.txt")
    (out / "checkpoint.bin").write_bytes(checkpoint.save_run(run))
    summary = experiment.summary_text(setup, result, scheme)
    infeasible = sum(1 for l in result.logs if l.event == "infeasible")
    if warnings or infeasible:
        summary += f"warnings: {len(warnings) + (1 if infeasible else 0)}\n"
        for w in warnings:
            summary += f"  - {w}\n"
        if infeasible:
            summary += f"  - {infeasible} round(s) exceeded the uplink budget\n"
    (out / "summary.txt").write_text(summary)
    if not args.quiet:
        print(summary, end="")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _load(args)
    setup = experiment.build(cfg)
    rel = setup.relevance
    lines = ["expert relevant probability p[m][c]:"]
    for m, row in enumerate(rel.p):
        lines.append(f"  expert {m}: " + " ".join(f"{v:.4f}" for v in row))
    lines.append(f"truncated at p_th={rel.p_th}:")
    for m, row in enumerate(rel.p_trunc):
        lines.append(f"  expert {m}: " + " ".join(f"{v:.4f}" for v in row))
    lines.append("assignment probabilities:")
    for m, row in enumerate(rel.p_assign):
        lines.append(f"  expert {m}: " + " ".join(f"{v:.4f}" for v in row))
    lines.append("assignment:")
    for c, g in enumerate(setup.assignment.groups):
        lines.append(f"  cluster {c}: experts {sorted(g)}")
    unassignable = rel.unassignable()
    if unassignable:
        lines.append(f"warning: experts {unassignable} are unassignable "
                     "(all relevance below threshold); they stay frozen")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        setup.assignment.export(out / "assignment.txt")
        (out / "split.txt").write_text(text)
    if not args.quiet:
        print(text, end="")
    return EXIT_OK


def cmd_linkbudget(args) -> int:
    cfg = _load(args)
    rate, budget = experiment.link_rate(cfg)
    setup_plan = channel.build_contact_plan(
        cfg.data.n_clusters,
        channel.cycle_length(cfg.data.n_clusters,
                             cfg.link.idle_slots_per_cycle) * 2,
        cfg.link.idle_slots_per_cycle)
    lines = [
        f"uplink rate: {rate / 1e6:.3f} Mbit/s",
        f"window: {cfg.link.window_seconds:g} s -> {budget} bytes",
        "contact plan (two cycles): "
        + " ".join("IDLE" if c is channel.IDLE else str(c)
                   for c in setup_plan),
    ]
    if rate == 0.0:
        lines.append("warning: elevation below threshold; link is down "
                     "(all rounds idle)")
    text = "\n".join(lines) + "\n"
    if not args.quiet:
        print(text, end="")
    return EXIT_OK


_BOUND_KEYS = {"l_smooth", "g_expert", "g_gate", "sigma_expert_sq",
               "sigma_gate_sq", "zeta_expert_sq", "gamma", "n_clusters",
               "init_gap"}


def cmd_bounds(args) -> int:
    if not args.cycles:
        print("error: at least one --cycles value is required", file=sys.stderr)
        return EXIT_CONFIG
    with open(args.params, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - _BOUND_KEYS
    if unknown:
        print(f"error: unknown bound parameter(s) {sorted(unknown)}",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        p = BoundParams(**raw)
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = ["cycles split_async_bound baseline_bound"]
    for t in args.cycles:
        rows.append(f"{t} {analysis.bound_split_async(p, t)!r} "
                    f"{analysis.bound_baseline(p, t)!r}")
    z = analysis.crossover_zeta_sq(p, args.cycles[0])
    rows.append(f"crossover zeta_expert_sq at T={args.cycles[0]}: {z!r}")
    text = "\n".join(rows) + "\n"
    if not args.quiet:
        print(text, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schemes = args.schemes or ["baseline", "async", "masked"]
    target = args.target if args.target is not None else cfg.train.target_loss
    summaries = []
    cycle = None
    datasets = None
    for scheme in schemes:
        results = []
        for seed in args.seeds:
            run_cfg = dataclasses.replace(
                cfg, seed=seed,
                train=dataclasses.replace(cfg.train, scheme=scheme))
            setup = experiment.build(run_cfg)
            cycle = setup.cycle_len
            datasets = setup.datasets
            result = experiment.run(setup, scheme)
            results.append(result)
            sub = out / f"{scheme}_seed{seed}"
            sub.mkdir(exist_ok=True)
            (sub / "metrics.csv").write_text(
                experiment.metrics_csv(result, scheme))
        summaries.append(analysis.summarize(scheme, results, datasets,
                                            cycle, target))
    (out / "report.csv").write_text(analysis.report_csv(summaries))
    text = analysis.report_text(summaries, target)
    (out / "report.txt").write_text(text)
    if not args.quiet:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satfed",
        description="Federated mixture-of-experts training over an "
                    "intermittent satellite uplink (desk-scale simulator)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("run", help="run one experiment, write all outputs")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("split", help="run the expert-splitting pipeline only")
    common(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("linkbudget", help="print rate, bytes, plan preview")
    common(p)
    p.set_defaults(func=cmd_linkbudget)

    p = sub.add_parser("bounds", help="tabulate the convergence bounds")
    p.add_argument("--params", required=True,
                   help="TOML file with the bound constants")
    p.add_argument("--cycles", type=int, nargs="*", default=[],
                   help="orbital-cycle counts T to evaluate")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("compare", help="run all schemes and emit a report")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--schemes", nargs="*", default=None)
    p.add_argument("--target", type=float, default=None,
                   help="target global loss for cycles-to-target")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to exit 3
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
