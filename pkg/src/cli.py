"""
Command-line entry point: run the whole pipeline, a single stage, or print defaults.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from .config import load_config
from .mffnet import FUSION_KINDS
from .pipeline import STAGES, StageError, run_pipeline, run_stage

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src",
                                     description="Two-stage weakly supervised localization on synthetic shapes.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR", dest="out_dir", help="output directory")
    common.add_argument("--fusion", choices=FUSION_KINDS)
    common.add_argument("--fuse-k", type=int, choices=(1, 2, 3, 4), dest="fuse_k")
    common.add_argument("--no-mca", action="store_false", dest="use_mca", default=None)
    common.add_argument("--no-aux", action="store_false", dest="use_aux", default=None)
    common.add_argument("--no-gauss", action="store_false", dest="use_gauss", default=None)
    common.add_argument("--no-threshold", action="store_false", dest="use_threshold", default=None)
    common.add_argument("--no-seg", action="store_false", dest="use_seg", default=None)
    common.add_argument("--dump-png", action="store_true", dest="dump_png", default=None)
    common.add_argument("--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    stage = sub.add_parser("stage", parents=[common], help="run a single stage")
    stage.add_argument("name", choices=STAGES)
    sub.add_parser("defaults", parents=[common], help="print the resolved configuration")
    return parser


OVERRIDE_KEYS = ("seed", "out_dir", "fusion", "fuse_k", "use_mca", "use_aux", "use_gauss",
                 "use_threshold", "use_seg", "dump_png")


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags the user actually passed; unset flags stay None and are skipped."""
    return {key: getattr(args, key) for key in OVERRIDE_KEYS if getattr(args, key, None) is not None}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    try:
        config = load_config(args.config, flag_overrides(args))
    except (ValueError, FileNotFoundError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 2

    if args.command == "defaults":
        sys.stdout.write(config.to_text())
        return 0

    try:
        if args.command == "pipeline":
            report = run_pipeline(config)
        else:
            report = run_stage(args.name, config)
    except StageError as e:
        print(f"stage {e.stage} failed: {e.cause}", file=sys.stderr)
        return 1
    except OSError as e:
        # the run directory is created before any stage starts
        print(f"output directory {config.out_dir} unusable: {e}", file=sys.stderr)
        return 1

    if report is not None:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
