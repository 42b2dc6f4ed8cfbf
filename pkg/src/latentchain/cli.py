"""Command-line entry point.

Subcommands cover the full reproduction surface: corpus generation, the
two reasoner training phases, talker and baseline training, the noise
robustness harness and the latent-space analyses. Heavy imports happen
after argument parsing so --threads can pin the BLAS pool first.
"""

from __future__ import annotations

import argparse
import os
import sys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentchain",
        description="decoupled latent reasoner: data, training, evaluation",
    )
    parser.add_argument("--config", help="config file path or preset name")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int,
                        help="BLAS/OpenMP thread count for this run")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate train/test corpora")

    p = sub.add_parser("pretrain", help="next-token pretraining")
    p.add_argument("--data", required=True)

    p = sub.add_parser("sst", help="latent-prediction training phase")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrain checkpoint")

    p = sub.add_parser("train-talker", help="train a talker on a frozen reasoner")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="sst checkpoint")

    p = sub.add_parser("train-baseline", help="train the vanilla or coconut baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrain checkpoint")
    p.add_argument("--variant", choices=("vanilla", "coconut"), default="vanilla")

    p = sub.add_parser("eval-robustness", help="noise-injection evaluation")
    p.add_argument("--data", required=True, help="held-out test corpus")
    p.add_argument("--noise", choices=("token", "latent"), default="token")
    p.add_argument("--reasoner")
    p.add_argument("--talker")
    p.add_argument("--vanilla")
    p.add_argument("--coconut")

    p = sub.add_parser("analyze-latents", help="sibling-plane statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="sst checkpoint")

    p = sub.add_parser("k-sweep", help="loss-scale sweep over the latent phase")
    p.add_argument("--data", required=True)
    p.add_argument("--probes", required=True, help="held-out probe corpus")
    p.add_argument("--checkpoint", required=True, help="pretrain checkpoint")
    p.add_argument("--k-values", default="1,2,3,4,5,6")

    p = sub.add_parser("pca-export", help="export latents on principal axes")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="sst checkpoint")

    return parser


def _pin_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        _pin_threads(args.threads)

    from .config import load_config
    from .errors import LatentChainError
    from . import pipeline

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.require_seed()
        out = args.out
        if args.command == "gen-data":
            result = pipeline.run_gen_data(cfg, out)
        elif args.command == "pretrain":
            result = pipeline.run_pretrain(cfg, args.data, out)
        elif args.command == "sst":
            result = pipeline.run_sst(cfg, args.checkpoint, args.data, out)
        elif args.command == "train-talker":
            result = pipeline.run_train_talker(cfg, args.checkpoint, args.data, out)
        elif args.command == "train-baseline":
            result = pipeline.run_train_baseline(cfg, args.checkpoint, args.data,
                                                 out, args.variant)
        elif args.command == "eval-robustness":
            result = pipeline.run_eval_robustness(
                cfg, args.data, out, args.noise,
                reasoner_ckpt=args.reasoner, talker_ckpt=args.talker,
                vanilla_ckpt=args.vanilla, coconut_ckpt=args.coconut)
        elif args.command == "analyze-latents":
            result = pipeline.run_analyze_latents(cfg, args.checkpoint,
                                                  args.data, out)
        elif args.command == "k-sweep":
            k_values = [float(k) for k in args.k_values.replace(",", " ").split()]
            result = pipeline.run_k_sweep(cfg, args.checkpoint, args.data,
                                          args.probes, out, k_values)
        else:
            result = pipeline.run_pca_export(cfg, args.checkpoint, args.data, out)
    except (LatentChainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, value in sorted(result.items()):
        if hasattr(value, "__fspath__") or isinstance(value, str):
            print(f"{name}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
