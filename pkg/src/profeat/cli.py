"""Command line: ``profeat {pretrain,distill,eval,run,grid,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .evaluation import EvalError, write_reports
from .experiment import (GRIDS, ConfigError, collect_reports, dump_config, format_report_table,
                         grid_cells, load_config, plot_sweep, report_row, resolve_config, run_grid,
                         run_experiment, write_csv)
from .training import Checkpoint

STAGES = {"pretrain": ("teacher",), "distill": ("teacher", "student"),
          "eval": ("teacher", "student", "eval"), "run": ("teacher", "student", "eval")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="profeat", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--out", type=Path, help="output directory (default: config 'out')")
        sp.add_argument("--dry-run", action="store_true",
                        help="print the fully resolved config and exit")
        sp.add_argument("--resume", action="store_true",
                        help="continue from partial per-epoch checkpoints")
        sp.add_argument("-v", "--verbose", action="store_true")

    for verb in STAGES:
        sp = sub.add_parser(verb)
        common(sp)
        if verb == "eval":
            sp.add_argument("--checkpoint", type=Path,
                            help="evaluate this checkpoint instead of the pipeline's student")
    sp = sub.add_parser("grid")
    common(sp)
    sp.add_argument("--grid", choices=GRIDS, help="registered grid (default: config grid.name)")
    sp = sub.add_parser("report")
    sp.add_argument("runs", nargs="+", type=Path, help="run directories or report.jsonl files")
    sp.add_argument("--csv", type=Path, help="also write the table as CSV")
    sp.add_argument("--plot", type=Path, help="plot a beta/lambda grid CSV (first run argument)")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args):
    raw = load_config(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = str(args.out)
    return resolve_config(raw)


def _cmd_stage(args) -> int:
    cfg = _resolve(args)
    if args.dry_run:
        print(dump_config(cfg), end="")
        return 0
    if args.verb == "eval" and args.checkpoint:
        from .experiment import evaluate, load_data

        report = evaluate(cfg, Checkpoint.load(args.checkpoint), load_data(cfg), str(args.checkpoint))
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_reports(out / "report.jsonl", [report])
        print(format_report_table([report]))
        return 0
    result = run_experiment(cfg, Path(cfg.out), args.resume, STAGES[args.verb])
    if "report" in result:
        print(format_report_table([result["report"]]))
    else:
        print(f"{args.verb}: done, artifacts in {cfg.out}")
    return 0


def _cmd_grid(args) -> int:
    cfg = _resolve(args)
    name = args.grid or (cfg.grid or {}).get("name")
    if args.dry_run:
        print(dump_config(cfg), end="")
        if name:
            print(f"# grid {name}: " + ", ".join(row for row, _ in grid_cells(name, cfg.to_dict())))
        return 0
    rows, failed = run_grid(cfg, name, Path(cfg.out), args.resume)
    from .evaluation import format_table

    print(format_table(rows, ("row", "SA", "RA_pgd20_ce", "RA_margin_pgd", "masking_gap",
                              "cos_feature", "cos_projector", "collapsed", "status")))
    if failed:
        print(f"{failed} grid cell(s) failed", file=sys.stderr)
        return 1
    return 0


def _cmd_report(args) -> int:
    if args.plot:
        plot_sweep(args.runs[0], args.plot)
        print(f"wrote {args.plot}")
        return 0
    reports = collect_reports(args.runs)
    print(format_report_table(reports))
    if args.csv:
        write_csv(args.csv, [report_row(r) for r in reports])
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "grid":
            return _cmd_grid(args)
        if args.verb == "report":
            return _cmd_report(args)
        return _cmd_stage(args)
    except (ConfigError, EvalError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
