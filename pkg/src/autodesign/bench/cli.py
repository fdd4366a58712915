"""Command-line entry point.

    autodesign search   --config exp.yaml [--seed N] [--hardware edge] [--out DIR]
    autodesign prune    --config exp.yaml ...
    autodesign quantize --config exp.yaml ...
    autodesign oracle   --config exp.yaml ...
    autodesign report   --out DIR

Exit codes: 0 success, 2 configuration error, 3 infeasible budget,
4 pipeline failure.
"""

import argparse
import logging
import sys

from ..errors import AutodesignError, BudgetError, ConfigError, UsageError
from .config import PIPELINES, load_config
from .report import report
from .runner import RunError, run

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_PIPELINE = 0, 2, 3, 4

log = logging.getLogger("autodesign")


def build_parser():
    p = argparse.ArgumentParser(prog="autodesign", description="Hardware-aware design automation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        s = sub.add_parser(name, help=f"run the {name} pipeline")
        s.add_argument("--config", required=True, help="experiment YAML file")
        s.add_argument("--seed", type=int, help="override the config's seed(s) with one seed")
        s.add_argument("--hardware", action="append",
                       help="hardware profile name or file (repeatable); overrides the config")
        s.add_argument("--out", default="runs", help="output directory (default: runs)")
    r = sub.add_parser("report", help="summarize a finished experiment directory")
    r.add_argument("--out", required=True, help="experiment directory to summarize")
    r.add_argument("--report-dir", help="where to write the report (default: <out>/report)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if args.command == "report":
        try:
            out = report(args.out, args.report_dir)
        except UsageError as e:
            log.error("error: %s", e)
            return EXIT_CONFIG
        log.info("report written to %s", out)
        return EXIT_OK
    try:
        config, text = load_config(args.config, args.seed, args.hardware)
        if config.pipeline != args.command:
            raise ConfigError(f"config pipeline is {config.pipeline!r} but command is {args.command!r}")
        rows = run(config, text, args.out)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except RunError as e:
        log.error("error: %s", e)
        if isinstance(e.cause, ConfigError):
            return EXIT_CONFIG
        return EXIT_BUDGET if isinstance(e.cause, BudgetError) else EXIT_PIPELINE
    except AutodesignError as e:
        log.error("error: %s", e)
        return EXIT_PIPELINE
    for r in rows:
        log.info("%s accuracy=%.4f achieved=%s", r.run_id, r.accuracy, r.achieved)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
