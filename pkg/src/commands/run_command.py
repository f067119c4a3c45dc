import argparse
import logging
import os
import sys

from pydantic import ValidationError

from services.errors import IncompatibleExperiment, ScenarioError
from services.runner_service import build_scenario, exit_code, run_scenario, write_jsonl

logger = logging.getLogger("perpetua.run_command")

EXIT_CONFIG = 2
EXIT_INCOMPATIBLE = 3

# flag dest -> Scenario or Policy field
OVERRIDES = {
    "law": "law",
    "b": "bspec",
    "experiment": "experiment",
    "seed": "seed",
    "reps": "replicates",
    "horizon": "horizon",
    "eps": "eps",
    "nmax": "nmax",
    "pop_cap": "pop_cap",
    "gen_cap": "gen_cap",
    "confidence": "confidence",
    "threads": "threads",
    "out": "output",
}


def _default_threads():
    value = os.getenv("PERPETUA_THREADS")
    return int(value) if value else None


class RunCommand:
    name = "run"
    help = "Run one experiment scenario and append JSONL result records"

    def configure(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--scenario", help="JSON scenario file; flags override its values")
        parser.add_argument("--law", help="law text form, e.g. const:m=0.5,q=1")
        parser.add_argument("--b", help="b-function text form, e.g. power:alpha=1")
        parser.add_argument("--experiment", help="perp-moment, brw-martingale, inequality:symm, ...")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--reps", type=int, help="replicates")
        parser.add_argument("--horizon", type=int, help="generations or path length")
        parser.add_argument("--eps", type=float)
        parser.add_argument("--nmax", type=int)
        parser.add_argument("--pop-cap", type=int, dest="pop_cap")
        parser.add_argument("--gen-cap", type=int, dest="gen_cap")
        parser.add_argument("--confidence", type=float)
        parser.add_argument("--threads", type=int, default=_default_threads())
        parser.add_argument("--out", help="JSONL file to append to; stdout when omitted")
        parser.add_argument("--dump", help="append path or spine debug rows to this JSONL file")
        parser.add_argument("--timings", action="store_true", help="include elapsed_ms in records")
        parser.add_argument("--quick", action="store_true", help="divide replicates by PERPETUA_QUICK_FACTOR")

    def __call__(self, args: argparse.Namespace) -> int:
        overrides = {field: getattr(args, dest) for dest, field in OVERRIDES.items()}
        try:
            scenario = build_scenario(args.scenario, overrides)
            records = run_scenario(scenario, quick=args.quick, timings=args.timings, dump=args.dump)
        except ValidationError as exc:
            logger.error(f"Invalid scenario: {exc}")
            return EXIT_CONFIG
        except ScenarioError as exc:
            logger.error(f"{exc.code}: {exc.message}")
            return EXIT_CONFIG
        except IncompatibleExperiment as exc:
            logger.error(f"{exc.code}: {exc.message}")
            return EXIT_INCOMPATIBLE
        lines = write_jsonl(records, scenario.output)
        if not scenario.output:
            for line in lines:
                sys.stdout.write(line + "\n")
        return exit_code(records)
