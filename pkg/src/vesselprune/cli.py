import argparse
import logging
import os
import sys

from vesselprune import settings
from vesselprune.config import ConfigError, PipelineConfig, load_config
from vesselprune.gat import NumericalError
from vesselprune.manifest import HashMismatchError
from vesselprune.pipeline import STAGE_COMMANDS, cmd_eval, cmd_sweep, run_pipeline

COMMANDS = settings.STAGES + ["sweep", "pipeline"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselprune",
        description="Trace vessel trees from centerline heatmaps and prune false branches.",
    )
    parser.add_argument("command", choices=COMMANDS, help="stage to run, a sweep or all stages")
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--out", default=None, help="output root, overrides the config's out_dir")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config's rng_seed")
    parser.add_argument(
        "--strict", action="store_true", help="verify upstream manifests before reading a stage"
    )
    parser.add_argument("--axis", choices=settings.SWEEP_AXES, help="sweep axis")
    parser.add_argument("--values", type=float, nargs="+", help="sweep axis values")
    parser.add_argument("--pred", default=None, help="eval only: predicted SWC file")
    parser.add_argument("--gt", default=None, help="eval only: ground truth SWC file")
    return parser


def resolve_config(args) -> PipelineConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace("rng_seed", args.seed)
    if args.out is not None:
        config = config.replace("out_dir", args.out)
    return config


def run_command(args, config: PipelineConfig):
    out_dir = config.out_dir
    if args.command == "sweep":
        if args.axis is None or not args.values:
            raise ConfigError("sweep: --axis and --values are required")
        return cmd_sweep(config, args.axis, args.values, out_dir, args.strict)
    if args.command == "pipeline":
        return run_pipeline(config, out_dir, args.strict)
    if args.command == "eval":
        return cmd_eval(config, out_dir, args.strict, pred_path=args.pred, gt_path=args.gt)
    return STAGE_COMMANDS[args.command](config, out_dir, args.strict)


def main(argv=None) -> int:
    """Entry point of the `vesselprune` command.

    Returns:
        int:
            0 on success, 2 for an invalid config or a manifest mismatch, 3 for a missing input
            and 4 for a numerical failure during training
    """
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
    except ConfigError as err:
        print(f"Invalid config: {err}", file=sys.stderr)
        return settings.EXIT_CONFIG_ERROR
    except FileNotFoundError as err:
        print(err, file=sys.stderr)
        return settings.EXIT_MISSING_INPUT

    os.makedirs(config.out_dir, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        filename=os.path.join(config.out_dir, settings.LOG_FILE_NAME),
        filemode="a",
        format="%(name)s - %(levelname)s - %(message)s",
        force=True,
    )

    try:
        run_command(args, config)
    except (ConfigError, HashMismatchError) as err:
        logging.error(str(err))
        print(err, file=sys.stderr)
        return settings.EXIT_CONFIG_ERROR
    except FileNotFoundError as err:
        logging.error(str(err))
        print(err, file=sys.stderr)
        return settings.EXIT_MISSING_INPUT
    except NumericalError as err:
        logging.error(str(err))
        print(err, file=sys.stderr)
        return settings.EXIT_NUMERICAL_ERROR
    return settings.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
