"""
Command-line interface.

Every flag writes into a dotted configuration key (``--passes`` sets
``search.passes``), so flags, the JSON config file and the environment all
land in the same RunConfig; flags win.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from app.app import create_app
from core.error_handler import EXIT_OK, ErrorHandler

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Parser destinations that are not configuration keys.
COMMAND_ARGS = {"command", "config", "out", "count", "purpose", "sweep", "compare_model", "log_level"}


def configure_logging(level: Optional[str] = None) -> None:
    level_name = (level or os.environ.get("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, dest="seed")
    parser.add_argument("--threads", type=int, dest="threads")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--log-level", dest="log_level")


def _model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", dest="data.model_path", help="full-precision EVQM model")
    parser.add_argument("--quant-model", dest="data.quant_model_path", help="quantized EVQM model")
    parser.add_argument("--calib", dest="data.calib_path", help="calibration EVQD dataset")
    parser.add_argument("--calib-size", type=int, dest="data.calib_size")
    parser.add_argument("--batch-size", type=int, dest="data.batch_size")
    parser.add_argument("--bits", type=int, dest="quant.weight_bits")
    parser.add_argument("--activation-bits", type=int, dest="quant.activation_bits")
    parser.add_argument("--scheme", choices=["minmax", "percentile", "omse"], dest="quant.weight_init")
    parser.add_argument(
        "--bias-correction", action="store_const", const=True, dest="quant.bias_correction"
    )


def _loss_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--loss", choices=["infonce", "mse", "cosine", "kl"], dest="loss.kind")
    parser.add_argument("--tau", type=float, dest="loss.tau")
    parser.add_argument(
        "--label-aware", action="store_const", const=True, dest="loss.label_aware_negatives"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evolq", description="Block-wise evolutionary search of quantization scales"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic EVQD dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--purpose", default="calib", help="dataset split (calib, eval, ...); splits share class means")
    p.add_argument("--separation", type=float, dest="data.class_separation")

    p = sub.add_parser("init", help="write a full-precision EVQM model")
    _common(p)
    p.add_argument("--out")

    p = sub.add_parser("quantize", help="initialize quantization scales")
    _common(p)
    _model_args(p)

    p = sub.add_parser("search", help="run the block-wise evolutionary search")
    _common(p)
    _model_args(p)
    _loss_args(p)
    p.add_argument("--eval", dest="data.eval_path", help="held-out EVQD dataset")
    p.add_argument("--passes", type=int, dest="search.passes")
    p.add_argument("--population", type=int, dest="search.population")
    p.add_argument("--cycles", type=int, dest="search.cycles")
    p.add_argument("--samples", type=int, dest="search.samples")
    p.add_argument("--epsilon", type=float, dest="search.epsilon")
    p.add_argument(
        "--attention-only", action="store_const", const=True, dest="search.attention_only"
    )
    p.add_argument("--timing", action="store_const", const=True, dest="trace_timing")
    p.add_argument("--sweep", help="KEY=v1,v2 or KEY=a..b over passes, cycles, calib_size, seed, loss, tau")

    p = sub.add_parser("landscape", help="scan the loss landscape of one block")
    _common(p)
    _model_args(p)
    _loss_args(p)
    p.add_argument("--eval", dest="data.eval_path")
    p.add_argument("--block", type=int, dest="landscape.block")
    p.add_argument("--steps", type=int, dest="landscape.steps")
    p.add_argument("--range", type=float, dest="landscape.half_range")
    p.add_argument("--direction-a", type=int, dest="landscape.direction_a")
    p.add_argument("--direction-b", type=int, dest="landscape.direction_b")
    p.add_argument("--epsilon", type=float, dest="search.epsilon")
    p.add_argument("--no-heatmap", action="store_const", const=False, dest="landscape.heatmap")

    p = sub.add_parser("compare-opt", help="ES vs gradient optimizers on egg-carton surfaces")
    _common(p)
    p.add_argument("--budget", type=int, dest="compare.budget")
    p.add_argument("--seeds", type=int, dest="compare.seeds")
    p.add_argument("--dim", type=int, dest="compare.dim")
    p.add_argument("--frequency", type=float, dest="compare.frequency")
    p.add_argument("--amplitude", type=float, dest="compare.amplitude")
    p.add_argument("--quadratic-weight", type=float, dest="compare.quadratic_weight")
    p.add_argument("--lr", type=float, dest="compare.lr")

    p = sub.add_parser("eval", help="agreement and losses against the FP model")
    _common(p)
    _model_args(p)
    _loss_args(p)
    p.add_argument("--data", dest="data.eval_path", help="EVQD dataset to evaluate on")
    p.add_argument("--compare-model", help="second EVQM model for the W^O comparison")
    return parser


def config_flags(args: argparse.Namespace) -> Dict[str, Any]:
    """Every parsed flag that maps to a configuration key."""
    return {k: v for k, v in vars(args).items() if k not in COMMAND_ARGS and v is not None}


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    app = create_app(args.config, config_flags(args))
    if args.command == "synth":
        return app.synth(args.out, args.count, args.purpose)
    if args.command == "init":
        return app.init(args.out)
    if args.command == "quantize":
        return app.quantize()
    if args.command == "search":
        return app.sweep(args.sweep) if args.sweep else app.search()
    if args.command == "landscape":
        return app.landscape()
    if args.command == "compare-opt":
        return app.compare_opt()
    return app.eval(args.compare_model)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and return the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        result = dispatch(args)
    except Exception as e:
        result = ErrorHandler.handle_command_error(e, args.command)
        print(result["message"], file=sys.stderr)
        return result["exit_code"]
    print(result["message"])
    return EXIT_OK
