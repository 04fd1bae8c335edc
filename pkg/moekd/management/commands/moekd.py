"""
MoEKD pipeline command-line interface.

Usage:
    python manage.py moekd run --config configs/benchmark.json
    python manage.py moekd fuse --config my.json --stage-seed-offset 1
    python manage.py moekd stats --x 0.2,0.3,0.1,0.4,0.25 --y 0.3,0.5,0.2,0.6,0.45

Exit codes: 0 success, 1 usage error, 2 stage failure.
"""

import argparse
import sys

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError, CommandParser

from moekd.artifacts import dumps_canonical
from moekd.pipeline import STAGES, StageFailed, StaleArtifact, describe_error, load_pipeline
from moekd.stats import compare

SUBCOMMANDS = {
    "gen-data": "Write the synthetic benchmark corpus",
    "prepare": "Balance, split and group the corpus; cache features",
    "train-experts": "Train one expert per CWE group and the single teacher",
    "train-router": "Train the focal-loss CWE router",
    "fuse": "Fuse top-k expert logits over the distill split",
    "distill": "Train MoEKD and single-teacher students",
    "eval": "Evaluate teachers, router and students on held-out data",
    "attack": "Run identifier-renaming attacks against the students",
    "stats": "Wilcoxon signed-rank test and Cliff's delta",
    "report": "Render report/report.txt and report/summary.json",
    "run": "Run every stage in order",
}

USAGE_EXIT = 1
FAILURE_EXIT = 2


class UsageParser(CommandParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}", returncode=USAGE_EXIT)


def float_list(value):
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from exc


class Command(BaseCommand):
    help = "Mixture-of-experts knowledge distillation pipeline"

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.__class__ = UsageParser
        return parser

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest="subcommand", required=True, parser_class=UsageParser)
        for name, help_text in SUBCOMMANDS.items():
            sub = subparsers.add_parser(name, help=help_text)
            sub.add_argument("--config", default=None, help="Pipeline config JSON (default: bundled benchmark)")
            sub.add_argument(
                "--stage-seed-offset",
                type=int,
                default=0,
                help="Added to the config seed for the stage(s) run by this invocation",
            )
            if name in ("run", "attack"):
                sub.add_argument("--workers", type=int, default=1, help="Threads for independent jobs")
            if name == "stats":
                sub.add_argument("--x", type=float_list, help="First paired vector, comma-separated")
                sub.add_argument("--y", type=float_list, help="Second paired vector, comma-separated")

    def handle(self, *args, **options):
        subcommand = options["subcommand"]
        try:
            if subcommand == "stats" and (options["x"] is not None or options["y"] is not None):
                return self.handle_paired_stats(options["x"], options["y"])

            pipeline = load_pipeline(
                options["config"],
                seed_offset=options["stage_seed_offset"],
                workers=options.get("workers", 1),
            )
            if subcommand == "gen-data":
                path = pipeline.gen_data()
                self.stdout.write(self.style.SUCCESS(f"Synthetic corpus written to {path}"))
            elif subcommand == "stats":
                self.stdout.write(dumps_canonical(pipeline.comparison()), ending="")
            elif subcommand == "run":
                outcome = pipeline.run()
                for name in STAGES:
                    self.stdout.write(f"{name:<14} {outcome[name]}")
                self.stdout.write(self.style.SUCCESS(f"Pipeline complete: {pipeline.workdir}"))
            else:
                ran = pipeline.run_stage(subcommand)
                self.stdout.write(self.style.SUCCESS(f"{subcommand}: {'done' if ran else 'up to date'}"))
                if subcommand == "report":
                    report = pipeline.path("report", "report.txt").read_text(encoding="utf-8")
                    self.stdout.write(report, ending="")
        except (StageFailed, StaleArtifact) as exc:
            raise CommandError(str(exc), returncode=FAILURE_EXIT) from exc
        except ValidationError as exc:
            raise CommandError(describe_error(exc), returncode=FAILURE_EXIT) from exc

    def handle_paired_stats(self, x, y):
        if x is None or y is None:
            raise CommandError("stats needs both --x and --y.", returncode=USAGE_EXIT)
        try:
            report = compare("x", x, "y", y)
        except ValidationError as exc:
            raise CommandError(describe_error(exc), returncode=FAILURE_EXIT) from exc
        self.stdout.write(dumps_canonical(report.to_dict()), ending="")
