"""Command-line entry: python -m app.main <command> [flags]"""

import argparse
import json
import sys
from typing import List, Optional

import torch

from .api import commands
from .core.config import settings
from .core.exceptions import CustomError
from .core.logger import logger
from .core.monitor import start_prometheus_server


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML experiment config (sections: model, data, discovery, steering, analysis)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vit-circuits", description=settings.APP_NAME)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="build a planted or random weight archive")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=commands.cmd_model)

    p = sub.add_parser("gen", help="generate a paired dataset")
    _add_common(p)
    p.add_argument("--out")
    p.set_defaults(handler=commands.cmd_gen)

    p = sub.add_parser("discover", help="mine a circuit")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--method", choices=["vicd", "eap", "eapig", "random"])
    p.add_argument("--preset", choices=["binary"], help="named Vi-CD protocol (binary: threshold 4e-4, logit diff)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--edges", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--metric", choices=["logitdiff", "kl"])
    p.add_argument("--target", type=int)
    p.add_argument("--max-visited", dest="max_visited", type=int)
    p.add_argument("--mode", choices=["live", "cached"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_discover)

    p = sub.add_parser("eval", help="faithfulness of a circuit file")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--circuit", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_eval)

    p = sub.add_parser("sweep", help="faithfulness curves over edge fractions")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--eval-pairs", dest="eval_pairs")
    p.add_argument("--methods", help="comma-separated subset of vicd,eap,eapig,random")
    p.add_argument("--grid", help="comma-separated edge fractions in (0, 1]")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--criterion", choices=["logitdiff", "kl"], help="threshold ladder instead of method curves")
    p.add_argument("--thresholds", help="comma-separated thresholds for --criterion")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_sweep)

    p = sub.add_parser("analyze", help="structure of a circuit ensemble")
    _add_common(p)
    p.add_argument("--circuits", required=True, help="glob of circuit files")
    p.add_argument("--universe", choices=["union", "all"])
    p.add_argument("--model")
    p.add_argument("--pairs")
    p.add_argument("--sizes", help="comma-separated subset sizes for dataset-size stability")
    p.add_argument("--binary", help="two classes A,B: evaluate binary circuits and class-circuit unions")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_analyze)

    p = sub.add_parser("steer", help="circuit-guided directional ablation sweep")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--circuit", required=True)
    p.add_argument("--pairs-attacked", dest="pairs_attacked", required=True)
    p.add_argument("--pairs-clean", dest="pairs_clean", required=True)
    p.add_argument("--regime", help="pre_normed|post_normed[:mean|medoid]")
    p.add_argument("--alpha-grid", dest="alpha_grid")
    p.add_argument("--layer-grid", dest="layer_grid")
    p.add_argument("--sender-global", dest="sender_global", action="store_true")
    p.add_argument("--directions", help="reuse a directions archive instead of estimating")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.cmd_steer)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse 사용법 오류도 exit 2
        return int(e.code or 0)

    logger.bind(command=args.command)
    if settings.TORCH_NUM_THREADS > 0:
        torch.set_num_threads(settings.TORCH_NUM_THREADS)
    if settings.METRICS_PORT > 0:
        start_prometheus_server(settings.METRICS_PORT)

    try:
        outputs = args.handler(args)
    except CustomError as e:
        logger.error(f"{args.command} failed: {e.message}", error_type=e.error_key)
        print(json.dumps(e.to_dict(), ensure_ascii=False), file=sys.stderr)
        return e.exit_status
    except Exception as e:
        logger.error(f"{args.command} crashed: {e}", error_type=type(e).__name__)
        error = CustomError("INTERNAL_ERROR", str(e))
        print(json.dumps(error.to_dict(), ensure_ascii=False), file=sys.stderr)
        return error.exit_status

    print(json.dumps({"status": "success", "outputs": outputs}, ensure_ascii=False))
    return 0


if __name__ == "__main__":
    sys.exit(main())
