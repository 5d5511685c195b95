#!/usr/bin/env python3
"""
TRG Lab - command-line entry point
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Add current directory to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

load_dotenv()

from config.run_config import RunConfig  # noqa: E402
from config.settings import LOG_FILE_PATH, LOG_LEVEL, OUTPUT_DIR, WORKERS  # noqa: E402
from core.exceptions import TrgError  # noqa: E402
from core.trg_block import SimilarityKind  # noqa: E402
from utils.logger import setup_logging  # noqa: E402
from utils.validators import head_list, positive_int, seed_value  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON run configuration")
    common.add_argument("--seed", type=seed_value, help="root seed (overrides the config file)")
    common.add_argument("--out", type=str, help="output directory (overrides the config file)")
    common.add_argument("--workers", type=positive_int, help="worker processes for data generation")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog="trg-lab", description="Temporal Reasoning Graph toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="generate a synthetic TRGD dataset")
    gen.add_argument("--output", type=Path, help="dataset path (default <out>/dataset.trgd)")

    sub.add_parser("train", parents=[common], help="train the configured variant")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out split")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--dataset", type=Path)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the TRG layer")
    gc.add_argument("--heads", type=positive_int, default=2)
    gc.add_argument("--kind", action="append", choices=[k.value for k in SimilarityKind],
                    help="similarity kind to check (repeatable, default all)")

    sub.add_parser("ablate", parents=[common], help="train all temporal-head variants")

    sw = sub.add_parser("sweep-heads", parents=[common], help="train the full model for several head counts")
    sw.add_argument("--heads", type=head_list, help="comma-separated head counts")

    ins = sub.add_parser("inspect-adjacency", parents=[common], help="dump per-head adjacency matrices")
    ins.add_argument("--checkpoint", type=Path)
    ins.add_argument("--dataset", type=Path)
    ins.add_argument("--index", type=int, default=0)
    ins.add_argument("--frames", type=positive_int, help="clip length (default: the model's)")
    ins.add_argument("--output-dir", type=Path)

    plot = sub.add_parser("plot", parents=[common], help="render a CSV produced by this tool as SVG")
    plot.add_argument("csv", type=Path)
    plot.add_argument("svg", type=Path)
    plot.add_argument("--y", default="top1", help="column to plot")

    sub.add_parser("compare-sampling", parents=[common], help="sparse vs dense sampling study")

    emb = sub.add_parser("export-embeddings", parents=[common], help="export classifier-input features as CSV")
    emb.add_argument("--checkpoint", type=Path)
    emb.add_argument("--dataset", type=Path)
    emb.add_argument("--output", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < environment < config file < command-line flags"""
    env = {"out_dir": OUTPUT_DIR, "workers": WORKERS}
    config = RunConfig.load(args.config, env) if args.config is not None else RunConfig.from_dict(env)
    return config.override(seed=args.seed, out_dir=args.out, workers=args.workers)


def dispatch(args: argparse.Namespace, config: RunConfig) -> int:
    from cli import commands

    if args.command == "gen-data":
        commands.cmd_gen_data(config, args.output)
    elif args.command == "train":
        commands.cmd_train(config)
    elif args.command == "eval":
        commands.cmd_eval(config, args.checkpoint, args.dataset)
    elif args.command == "gradcheck":
        kinds = [SimilarityKind(k) for k in args.kind] if args.kind else list(SimilarityKind)
        passed, _ = commands.cmd_gradcheck(config, args.heads, kinds)
        return EXIT_OK if passed else EXIT_FAILURE
    elif args.command == "ablate":
        commands.cmd_ablate(config)
    elif args.command == "sweep-heads":
        commands.cmd_sweep_heads(config, args.heads)
    elif args.command == "inspect-adjacency":
        commands.cmd_inspect_adjacency(config, args.index, args.checkpoint, args.dataset, args.output_dir, args.frames)
    elif args.command == "plot":
        commands.cmd_plot(args.csv, args.svg, args.y)
    elif args.command == "compare-sampling":
        commands.cmd_compare_sampling(config)
    elif args.command == "export-embeddings":
        commands.cmd_export_embeddings(config, args.checkpoint, args.dataset, args.output)
    return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or LOG_LEVEL, LOG_FILE_PATH)
    try:
        config = resolve_config(args)
        if args.dump_config:
            print(config.validate().dumps())
            return EXIT_OK
        logger.info(f"Starting {args.command}")
        code = dispatch(args, config)
        logger.info(f"Finished {args.command} (exit {code})")
        return code
    except TrgError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception:
        logger.exception(f"Unexpected error in {args.command}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(run())
