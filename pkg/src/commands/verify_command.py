import argparse
import logging

from formatters.verify_formatter import format_verify_table
from services.verify_service import SUITE_NAMES, run_suite

logger = logging.getLogger("perpetua.verify_command")


class VerifyCommand:
    name = "verify"
    help = "Run a fixed-seed check suite and print a pass/fail table"

    def configure(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("suite", choices=SUITE_NAMES)
        parser.add_argument("--quick", action="store_true", help="reduced replicate budgets")

    def __call__(self, args: argparse.Namespace) -> int:
        results = run_suite(args.suite, quick=args.quick)
        print(format_verify_table(results))
        return 0 if all(r.passed for r in results) else 1
