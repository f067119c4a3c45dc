import argparse
import logging

from formatters.report_formatter import REPORT_FORMATS, load_records, write_report
from services.errors import ScenarioError

logger = logging.getLogger("perpetua.report_command")


class ReportCommand:
    name = "report"
    help = "Render CSV tables and SVG/PNG plots from a JSONL results file"

    def configure(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("results", help="JSONL results file")
        parser.add_argument("--out", default="report", help="output directory")
        parser.add_argument(
            "--format",
            action="append",
            choices=REPORT_FORMATS,
            dest="formats",
            help="repeatable; defaults to csv and svg",
        )

    def __call__(self, args: argparse.Namespace) -> int:
        try:
            records = load_records(args.results)
            paths = write_report(records, args.out, args.formats or ("csv", "svg"))
        except ScenarioError as exc:
            logger.error(f"{exc.code}: {exc.message}")
            return 2
        for path in paths:
            print(path)
        return 0
