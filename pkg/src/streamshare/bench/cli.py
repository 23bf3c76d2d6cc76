"""Command line interface.

    streamshare run --workload w.json --strategy s.json --duration 6000 \
        --seed 7 --out metrics.csv [--plots figs/] [--sustain-search]
    streamshare sweep --param merge_period --values 10,30,60 ...
    streamshare plot --metrics metrics.csv --out figs/

Exit code 0 on success, 2 on configuration errors.  Log verbosity comes
from the STREAMSHARE_LOG environment variable (DEBUG/INFO/WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..errors import ConfigurationError
from .experiment import run_experiment, sweep
from .strategies import strategy_config_from_dict
from .workload import workload_config_from_dict

logger = logging.getLogger("streamshare")


def _setup_logging():
    level = os.environ.get("STREAMSHARE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {what} file {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} file {path} is not valid JSON: "
                                 f"{exc}")


def _parse_values(raw: str):
    values = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(int(part))
        except ValueError:
            try:
                values.append(float(part))
            except ValueError:
                raise ConfigurationError(
                    f"sweep value {part!r} is not a number")
    if not values:
        raise ConfigurationError("no sweep values given")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="streamshare",
        description="Deterministic work-sharing stream processing bench")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--workload", required=True,
                       help="workload config JSON file")
    run_p.add_argument("--strategy", required=True,
                       help="strategy config JSON file")
    run_p.add_argument("--duration", required=True, type=int,
                       help="run length in ticks")
    run_p.add_argument("--seed", type=int, default=1)
    run_p.add_argument("--out", required=True, help="metrics CSV path")
    run_p.add_argument("--plots", default=None,
                       help="directory for rendered figures")
    run_p.add_argument("--sustain-search", action="store_true",
                       help="binary-search the max sustainable rate "
                            "(slower)")

    sweep_p = sub.add_parser("sweep", help="run a parameter sweep")
    sweep_p.add_argument("--param", required=True,
                         help="merge_threshold | merge_period | "
                              "query_count | selectivity")
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated values")
    sweep_p.add_argument("--workload", required=True)
    sweep_p.add_argument("--strategy", required=True)
    sweep_p.add_argument("--duration", required=True, type=int)
    sweep_p.add_argument("--seed", type=int, default=1)
    sweep_p.add_argument("--out", required=True, help="sweep CSV path")
    sweep_p.add_argument("--plots", default=None)

    plot_p = sub.add_parser("plot", help="render figures from a metrics CSV")
    plot_p.add_argument("--metrics", required=True)
    plot_p.add_argument("--out", required=True, help="figure directory")
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            wcfg = workload_config_from_dict(
                _load_json(args.workload, "workload"))
            scfg = strategy_config_from_dict(
                _load_json(args.strategy, "strategy"))
            result = run_experiment(
                wcfg, scfg, args.duration, args.seed,
                out_csv=args.out, plots_dir=args.plots,
                sustain_search=args.sustain_search)
            print(f"wrote {args.out} "
                  f"(resources_final={result.summary['resources_final']}, "
                  f"groups={result.summary['groups_final']}, "
                  f"reconfigurations="
                  f"{result.summary['reconfigurations']})")
        elif args.command == "sweep":
            wcfg = workload_config_from_dict(
                _load_json(args.workload, "workload"))
            scfg = strategy_config_from_dict(
                _load_json(args.strategy, "strategy"))
            values = _parse_values(args.values)
            rows = sweep(args.param, values, wcfg, scfg, args.duration,
                         args.seed, out_csv=args.out, plots_dir=args.plots)
            print(f"wrote {args.out} ({len(rows)} rows)")
        else:
            from . import plots
            written = plots.render_metrics_csv(args.metrics, args.out)
            print(f"wrote {len(written)} figure(s) to {args.out}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
