"""Command-line entry point: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 success, 1 stage or configuration failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P

log = logging.getLogger("gmvae_osr")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmvae-osr", description="open-set recognition experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate (or ingest) the dataset",
        "impute": "carry-forward, categorical and chained imputation; write splits",
        "train-gmvae": "pretrain phi_z, train the GMVAE, store class centroids",
        "train-iiloss": "train the ii-loss network",
        "select-threshold": "pick tau* from the validation F1 curve",
        "fit-threshold": "fit the outlier-score threshold at contamination alpha",
        "evaluate": "incremental novel-class curves, confusion matrices, embeddings",
        "sweep": "F1 around the chosen threshold",
        "run": "every stage in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "fit-threshold":
            p.add_argument("--alpha", type=float, default=None, help="contamination ratio")
        if name == "sweep":
            p.add_argument("--rule", choices=["uncertainty", "outlier_score"], default=None,
                           help="sweep one rule (default: both)")
            p.add_argument("--center", type=float, default=None)
            p.add_argument("--halfwidth", type=float, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    if args.command == "sweep" and args.rule is None and (args.center is not None or args.halfwidth is not None):
        parser.error("--center/--halfwidth need --rule")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = P.ExperimentConfig.load(args.config)
        if getattr(args, "alpha", None) is not None:
            config.alpha = args.alpha
            config.__post_init__()
    except (P.ConfigError, ValueError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 1
    seed = config.seed if args.seed is None else args.seed
    ws = P.Workspace(args.out or config.output_dir, config)
    try:
        if args.command == "run":
            for stage in P.STAGES:
                log.info("stage %s", stage)
                P.run_stage(ws, stage, seed)
        elif args.command == "sweep" and args.rule is not None:
            P.run_stage(ws, "sweep", seed,
                        func=lambda w, s: P.run_sweep(w, args.rule, args.center, args.halfwidth)[1])
        else:
            P.run_stage(ws, args.command, seed)
    except P.StageError as exc:
        print(f"error: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {Path(ws.root)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
