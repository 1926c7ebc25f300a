#!/usr/bin/env python3
import argparse
import json
import logging
import sys
import time
import warnings
from queue import Queue

import coloredlogs
import torch

from recdistill.errors import ConfigError, RecDistillError
from recdistill.runner import METHODS, SWEEPS, ExperimentWorker, load_config

logger = logging.getLogger("recdistill")

# exit code for unexpected failures, per command
FALLBACK_EXIT = {"prepare": 2, "train": 3, "ablate": 3, "evaluate": 4, "report": 4}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.method is not None:
        overrides["method"] = args.method
    if args.out is not None:
        overrides["output_dir"] = args.out
    return overrides


def run_cli(args) -> int:
    # Setup queues for logs and progress updates
    log_queue = Queue()
    progress_queue = Queue()

    try:
        cfg = load_config(args.config, build_overrides(args))
    except RecDistillError as e:
        print(f"Error: {e}")
        return e.exit_code

    if args.threads:
        torch.set_num_threads(args.threads)

    print(f"Running '{args.command}' with the following options:")
    print(f" Config: {args.config or '(defaults)'}")
    print(f" Dataset: {cfg.dataset.path or 'synthetic world'}")
    print(f" Method: {cfg.method}")
    print(f" Architecture: {cfg.architecture}")
    print(f" Seeds: {cfg.seeds}")
    print(f" Output directory: {cfg.output_dir}")
    print(f" Resume: {args.resume}")
    if args.command == "ablate":
        print(f" Sweep: {args.sweep} {args.values or SWEEPS.get(args.sweep, '')}")
    print("------------------------------------------------------")

    values = [_parse_value(v) for v in args.values] if args.values else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=UserWarning)

        worker = ExperimentWorker(
            args.command,
            cfg,
            resume=args.resume,
            sweep=args.sweep,
            values=values,
            csv=getattr(args, "csv", None),
            plot=getattr(args, "plot", None),
            log_queue=log_queue,
            progress_queue=progress_queue,
        )
        worker.start()

        # Poll queues until the command completes
        while worker.is_alive():
            try:
                time.sleep(0.5)
            except KeyboardInterrupt:
                print("Termination requested. Stopping after the current stage.")
                worker.stop()
                worker.join()
                break
            while not log_queue.empty():
                print(log_queue.get_nowait())
            while not progress_queue.empty():
                current, total = progress_queue.get_nowait()
                percent = int((current / total) * 100)
                print(f"Progress: {percent}%")

    # Flush any remaining log messages
    while not log_queue.empty():
        print(log_queue.get_nowait())

    if worker.error is not None:
        error = worker.error
        if isinstance(error, RecDistillError):
            return error.exit_code
        return FALLBACK_EXIT[args.command]
    print(f"{args.command.capitalize()} completed.")
    return 0


class UsageParser(argparse.ArgumentParser):
    """Bad flags share the configuration-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(description="Soft-label distillation experiments for sequential recommenders")
    common = UsageParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="Run a single seed instead of the configured list")
    common.add_argument("--out", help="Output directory for all stages")
    common.add_argument("--method", choices=METHODS, help="Training method")
    common.add_argument("--threads", type=int, default=None, help="Torch intra-op threads")
    common.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                        help="Skip stages whose manifest is complete")
    common.add_argument("--log-level", default="INFO", help="Library log level (DEBUG, INFO, WARNING)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="Filter and split the dataset")
    sub.add_parser("train", parents=[common], help="Train teachers and students for every seed")
    sub.add_parser("evaluate", parents=[common], help="Rank the test split and write reports")
    ablate = sub.add_parser("ablate", parents=[common], help="Sweep one setting through train and evaluate")
    ablate.add_argument("--sweep", required=True, choices=sorted(SWEEPS), help="Setting to sweep")
    ablate.add_argument("--values", nargs="*", help="Sweep values (defaults per sweep)")
    report = sub.add_parser("report", parents=[common], help="Print stored reports; plot a sweep CSV")
    report.add_argument("--csv", help="Sweep CSV to plot")
    report.add_argument("--plot", help="Output image for --csv (default: next to the CSV)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else ConfigError.exit_code
    for name in ("sweep", "values"):
        if not hasattr(args, name):
            setattr(args, name, None)
    coloredlogs.install(level=args.log_level.upper(), logger=logger,
                        fmt="%(asctime)s %(name)s %(levelname)s %(message)s")
    return run_cli(args)


if __name__ == "__main__":
    sys.exit(main())
