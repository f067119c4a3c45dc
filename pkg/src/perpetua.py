import argparse
import logging
import sys

from dotenv import load_dotenv

load_dotenv()

from commands.laws_command import LawsCommand  # noqa: E402
from commands.report_command import ReportCommand  # noqa: E402
from commands.run_command import RunCommand  # noqa: E402
from commands.verify_command import VerifyCommand  # noqa: E402
from services.metrics_service import shutdown_metrics, start_metrics  # noqa: E402

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)
logger = logging.getLogger("perpetua")
logging.getLogger("opentelemetry").setLevel(logging.WARNING)

COMMANDS = (RunCommand(), VerifyCommand(), ReportCommand(), LawsCommand())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perpetua", description="Perpetuity and branching random walk simulator")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command.name, help=command.help)
        command.configure(sub)
        sub.set_defaults(handler=command)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    start_metrics()
    try:
        return args.handler(args)
    finally:
        shutdown_metrics()


if __name__ == "__main__":
    sys.exit(main())
