"""Command-line entry point: ``metarlbo <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from ..oracles import brute_force_max
from .baselines import BASELINE_KINDS, BaselineSpec
from .config import ConfigError, load_config, schema_text
from .experiment import analyze_uncertainty, plot_data, run_experiment


def _with_seeds(cfg, seeds):
    if not seeds:
        return cfg
    return dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, seeds=tuple(seeds)))


def _report(report) -> int:
    for seed, recs in sorted(report.runs.items()):
        print(f"seed {seed}: final cumulative max {recs[-1].cumulative_max:g} "
              f"({len(recs)} rounds) -> {report.run_dirs[seed]}")
    for seed, msg in sorted(report.failures.items()):
        print(f"error: seed {seed}: {msg}", file=sys.stderr)
    return 1 if report.failures else 0


def cmd_run(args) -> int:
    cfg = _with_seeds(load_config(args.config), args.seeds)
    if cfg.campaign.method in BASELINE_KINDS:
        print(f"note: method {cfg.campaign.method} is a baseline; running it anyway", file=sys.stderr)
    return _report(run_experiment(cfg, args.out, workers=args.workers))


def cmd_baseline(args) -> int:
    cfg = _with_seeds(load_config(args.config), args.seeds)
    kind = args.method or (cfg.campaign.method if cfg.campaign.method in BASELINE_KINDS
                           else "random_mutation")
    spec = cfg.campaign.baseline
    spec = dataclasses.replace(spec, kind=kind) if spec else BaselineSpec(kind=kind)
    cfg = dataclasses.replace(cfg, campaign=dataclasses.replace(cfg.campaign, method=kind, baseline=spec))
    return _report(run_experiment(cfg, args.out, workers=args.workers))


def cmd_analyze(args) -> int:
    result = analyze_uncertainty(args.run_dir, args.round)
    for (arch, n), v in sorted(result.items()):
        s = v["nll"]
        worst = max(abs(e - o) for e, o in v["calibration"])
        print(f"{arch} round {n}: NLL median {s['median']:.4g} (q1 {s['q1']:.4g}, q3 {s['q3']:.4g}), "
              f"max calibration gap {worst:.3f}")
    return 0


def cmd_brute_force(args) -> int:
    spec = load_config(args.config).campaign.oracle
    seq, score = brute_force_max(spec, args.max_enumeration)
    print(f"{spec.make_alphabet().decode(seq)}\t{score!r}")
    return 0


def cmd_plot_data(args) -> int:
    for run_dir in args.run_dir:
        for path in plot_data(run_dir):
            print(path)
    return 0


def cmd_schema(args) -> int:
    print(schema_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metarlbo", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn, text in (("run", cmd_run, "run a campaign for every configured seed"),
                           ("baseline", cmd_baseline, "run a mutation baseline on the same budget")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", type=Path)
        p.add_argument("--out", type=Path, default=Path("runs"), help="output root (default: runs)")
        p.add_argument("--seeds", type=int, nargs="+", help="override experiment.seeds")
        p.add_argument("--workers", type=int, default=1, help="seeds run in parallel")
        if name == "baseline":
            p.add_argument("--method", choices=BASELINE_KINDS)
        p.set_defaults(fn=fn)

    p = sub.add_parser("analyze", help="calibration and NLL of surrogates fitted on early rounds")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--round", type=int, default=None,
                   help="train on rounds <= n, test on round n+1 (default: every round)")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("brute-force", help="exact optimum of a small oracle by enumeration")
    p.add_argument("config", type=Path, help="config file with an [oracle] section")
    p.add_argument("--max-enumeration", type=int, default=2 ** 20)
    p.set_defaults(fn=cmd_brute_force)

    p = sub.add_parser("plot-data", help="re-emit curve CSVs for run or report directories")
    p.add_argument("run_dir", type=Path, nargs="+")
    p.set_defaults(fn=cmd_plot_data)

    p = sub.add_parser("schema", help="print the config schema")
    p.set_defaults(fn=cmd_schema)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
