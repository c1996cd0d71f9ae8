"""Command-line entry points: validate-generator, run, plotdata, analyze.

Thin wrappers over the experiments layer. Exit codes: 0 success, 1 for
probe failures or run-time errors, 2 for unusable configuration or
missing files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as ex


def _load_config(args):
    # an explicit config file wins over a preset
    if args.config:
        return ex.parse_config(args.config)
    if args.preset:
        return ex.PRESETS[args.preset]()
    raise ValueError("either --config or --preset is required")


def cmd_validate_generator(args):
    try:
        config = _load_config(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    reports = ex.validate_generator_report(config, probe_count=args.probes)
    out_dir = Path(args.out) if args.out else Path(config.directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "generator_validation.txt"
    ok = True
    lines = []
    for k, report in sorted(reports.items()):
        lines.append(f"[K={k}]")
        lines.extend(report.lines())
        ok = ok and report.passed
    report_path.write_text("\n".join(lines) + "\n")
    print(f"report written to {report_path}")
    print("all probes passed" if ok else "probe violations found")
    return 0 if ok else 1


def cmd_run(args):
    try:
        config = _load_config(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    records = ex.run_grid(
        config,
        out_dir=args.out,
        workers=args.workers,
        seed_offset=args.seed_offset,
        log=lambda msg: print(msg, flush=True),
    )
    failed = [r for r in records if r.status == "failed"]
    out_dir = Path(args.out) if args.out else Path(config.directory)
    print(f"{len(records)} runs, {len(failed)} failed; "
          f"combined results in {out_dir / 'combined.csv'}")
    return 0 if not failed else 1


def cmd_plotdata(args):
    source = Path(args.results)
    if not source.exists():
        print(f"results file not found: {source}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else source.with_name("plotdata.csv")
    try:
        ex.plotdata(source, out,
                    log=lambda msg: print(msg, file=sys.stderr))
    except (ValueError, IndexError) as exc:
        print(f"malformed results file: {exc}", file=sys.stderr)
        return 1
    print(f"scatter data written to {out}")
    return 0


def cmd_analyze(args):
    if args.oracle:
        targets = [Path(args.generator)]
        if not targets[0].exists():
            print(f"generator file not found: {targets[0]}", file=sys.stderr)
            return 2
        try:
            lines = ex.analyze_oracle(args.generator, n_samples=args.samples,
                                      seed=args.seed)
        except ValueError as exc:
            print(f"analyze failed: {exc}", file=sys.stderr)
            return 1
    else:
        if args.checkpoint is None:
            print("analyze needs --checkpoint (or --oracle)", file=sys.stderr)
            return 2
        for p in (args.checkpoint, args.generator):
            if not Path(p).exists():
                print(f"file not found: {p}", file=sys.stderr)
                return 2
        try:
            lines = ex.analyze_checkpoint(
                args.checkpoint, args.generator, n_samples=args.samples,
                seed=args.seed, correlated=args.correlated)
        except ValueError as exc:
            print(f"analyze failed: {exc}", file=sys.stderr)
            return 1
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slotprov",
        description="slot-structured synthetic scenes, contrast-penalized "
                    "training, and identifiability scoring")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", metavar="PATH", default=None,
                       help="INI experiment config")
        p.add_argument("--preset", choices=sorted(ex.PRESETS), default=None,
                       help="built-in configuration")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory (default: config's)")

    p = sub.add_parser("validate-generator",
                       help="probe generator rank structure")
    add_common(p)
    p.add_argument("--probes", type=int, default=100)
    p.set_defaults(func=cmd_validate_generator)

    p = sub.add_parser("run", help="execute or resume the experiment grid")
    add_common(p)
    p.add_argument("--workers", type=int, default=None,
                   help="parallel runs (default: config, then "
                        "SLOTPROV_WORKERS, then 1)")
    p.add_argument("--seed-offset", type=int, default=0,
                   help="shift every grid seed by N")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plotdata", help="emit scatter tuples from results")
    p.add_argument("results", metavar="COMBINED_CSV")
    p.add_argument("--out", metavar="PATH", default=None)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("analyze", help="structure report for a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH", default=None)
    p.add_argument("--generator", metavar="PATH", required=True)
    p.add_argument("--oracle", action="store_true",
                   help="analyze the generator itself as decoder")
    p.add_argument("--correlated", action="store_true",
                   help="sample analysis data with dependent slots")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="PATH", default=None)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"file not found: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
