import argparse
import logging
import sys

from cellprog.main import cmd_run
from cellprog.utils.log import configure_logging

logger = logging.getLogger(__name__)

CHAIN = ["synth", "denoise", "train", "eval", "dca", "peaks", "report"]


def main() -> int:
    parser = argparse.ArgumentParser(description="Run the full pipeline chain, or a single stage")
    parser.add_argument(
        "--stage",
        type=str,
        choices=CHAIN + ["all"],
        default="all",
        help="Stage to run (default: the whole chain in order)"
    )
    parser.add_argument("--out", default="runs/default", help="Shared output directory")
    parser.add_argument("--chemistry", default="lifepo4", help="lifepo4 or linicoalo2")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None, help="JSON run configuration shared by every stage")
    args = parser.parse_args()
    configure_logging()

    stages = CHAIN if args.stage == "all" else [args.stage]
    for stage in stages:
        argv = [stage, "--out", args.out, "--chemistry", args.chemistry]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        if args.config:
            argv += ["--config", args.config]
        logger.info(f"Starting stage {stage}...")
        code = cmd_run(argv)
        if code != 0:
            logger.error(f"Stage {stage} failed with exit code {code}")
            return code
    logger.info(f"Pipeline finished; artifacts in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
