"""Command line interface.

Subcommands: gen-data, train-tvlm, train, sample, eval, ablate.  Exit codes:
0 success, 2 validation error, 3 training divergence, 4 IO/format error.
"""

import argparse
import sys

from .config import RunConfig, load_config
from .errors import EIVSTError, exit_code_for
from .pipeline import (cmd_ablate, cmd_eval, cmd_gen_data, cmd_sample,
                       cmd_train, cmd_train_tvlm, run_lock)
from .rng import apply_thread_limit


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eivst",
        description="Transition-conditioned video generation on a synthetic "
                    "tabletop world: data, training, sampling, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate the synthetic episode corpus")
    common(p)

    p = sub.add_parser("train-tvlm",
                       help="train the transition model and instruction classifier")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("train", help="train the video diffusion model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--tvlm", help="transition-model checkpoint")
    p.add_argument("--trunk", help="shared stage-0 checkpoint to start from")

    p = sub.add_parser("sample", help="generate videos from a trained checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--count", type=int, default=1,
                   help="number of held-out episodes to sample")
    p.add_argument("--override-plan", dest="override_plan",
                   help="JSON transition plan to use instead of the predicted one")

    p = sub.add_parser("eval", help="compute the metric report for a checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--classifier", required=True,
                   help="instruction classifier checkpoint")

    p = sub.add_parser("ablate",
                       help="run the conditioning ablation and K-table end to end")
    common(p)
    return parser


def _config_from(args):
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config.validate()


def run(args):
    config = _config_from(args)
    if args.command == "gen-data":
        with run_lock(args.out):
            cmd_gen_data(config, args.out, force=args.force)
    elif args.command == "train-tvlm":
        with run_lock(args.out):
            cmd_train_tvlm(config, args.data, args.out)
    elif args.command == "train":
        with run_lock(args.out):
            cmd_train(config, args.data, args.out,
                      tvlm_path=args.tvlm, trunk_path=args.trunk)
    elif args.command == "sample":
        cmd_sample(config, args.checkpoint, args.data, args.out,
                   seed=args.seed, count=args.count,
                   override_plan_path=args.override_plan)
    elif args.command == "eval":
        from pathlib import Path

        Path(args.out).mkdir(parents=True, exist_ok=True)
        cmd_eval(config, args.checkpoint, args.data, args.classifier,
                 out_path=f"{args.out}/eval_report.json")
    elif args.command == "ablate":
        with run_lock(args.out):
            cmd_ablate(config, args.out, force=args.force)
    return 0


def main(argv=None):
    apply_thread_limit()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (EIVSTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
