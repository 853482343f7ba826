"""Command-line entry point: ``iie <subcommand> ...``.

Exit codes: 0 success, 2 the final embedding was flagged as failed, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
_STAGE_OF = {"generate": "generate", "estimate": "estimate", "embed": "embed", "run": None}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iie", description="Intrinsic-isometric manifold learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("generate", "sample a synthetic world and write the dataset"),
        ("estimate", "generate and estimate the metric field"),
        ("embed", "generate, estimate, build the graph and embed"),
        ("run", "full pipeline with evaluation and report"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        s.add_argument("--threads", type=int, help="cap numerical library threads")
        s.add_argument("--out", help="output directory (overrides the config)")
    c = sub.add_parser("compare", help="tabulate stress and RMSD across run directories")
    c.add_argument("runs", nargs="*", help="run directories containing report.json")
    c.add_argument("--csv", action="store_true", help="emit CSV instead of an aligned table")
    r = sub.add_parser("report", help="print the report of a run directory")
    r.add_argument("run", help="run directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        # must happen before numpy loads its BLAS
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    from .errors import IIEError, StageError
    from .pipeline import EXIT_ERROR, ExperimentConfig, RunReport, compare_table, load_config, run_experiment

    try:
        if args.command == "compare":
            sys.stdout.write(compare_table([RunReport.load(d) for d in args.runs], "csv" if args.csv else "text"))
            return 0
        if args.command == "report":
            rep = RunReport.load(args.run)
            sys.stdout.write(rep.to_json())
            sys.stdout.write(compare_table([rep]))
            return rep.exit_code

        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = _overrides(args.set)
        if "IIE_SEED" in os.environ:
            overrides["seed"] = int(os.environ["IIE_SEED"])
        if args.out:
            overrides["out"] = args.out
        if overrides:
            cfg = cfg.with_overrides(overrides)
        rep = run_experiment(cfg, stop_after=_STAGE_OF[args.command])
    except StageError as exc:
        print(f"error in stage {exc.stage}: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return EXIT_ERROR
    except (IIEError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    if args.command == "run":
        sys.stdout.write(compare_table([rep]))
        if rep.data["failure"]["failed"]:
            print(f"embedding failure flagged (rho={rep.data['failure']['rho']:.4g})", file=sys.stderr)
    elif rep.out_dir is not None:
        print(f"wrote {len(rep.data['artifacts'])} artifacts to {rep.out_dir}")
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
