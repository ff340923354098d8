"""``deepxlate`` command line: stats, train, translate, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .checkpoint import CheckpointError
from .config import CACHE_ENV, ConfigError, load_config
from .data import DatasetError
from .encoder import EncoderError
from .evaluation import EvalError
from .featnorm import StatsError
from .pipeline import PipelineError
from .training import StageOrderError, TrainingError
from . import workflow

EXIT_CODES = [
    (ConfigError, 2),
    (StageOrderError, 3),
    (workflow.ArtifactConflict, 4),
    (FileNotFoundError, 5),
    (CheckpointError, 6),
    (TrainingError, 7),
    ((DatasetError, EncoderError, StatsError, PipelineError, EvalError), 8),
]


def _add_common(p):
    p.add_argument("--config", "-c", help="RunConfig YAML file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set schedule.epochs=2 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepxlate",
        description="Unpaired image translation in deep feature space.",
        epilog=f"Environment: {CACHE_ENV} overrides the feature cache directory.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="compute channel stats and normalized feature caches for both domains")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="replace artifacts from a different config")

    p = sub.add_parser("train", help="train one stage")
    _add_common(p)
    p.add_argument("--stage", choices=["deepest", "conditional", "inverter"])
    p.add_argument("--level", type=int, help="level for conditional/inverter stages")
    p.add_argument("--domain", choices=["A", "B"], help="domain for the inverter stage")
    p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint")
    p.add_argument("--force", action="store_true", help="overwrite a checkpoint from a different config")
    p.add_argument("--max-steps", type=int, help="stop after this many generator steps")

    p = sub.add_parser("translate", help="translate one image or a folder")
    _add_common(p)
    p.add_argument("--in", dest="inp", required=True, help="image file or folder")
    p.add_argument("--out", required=True, help="output PNG or folder")
    p.add_argument("--direction", default="AtoB", choices=["AtoB", "BtoA"])

    p = sub.add_parser("evaluate", help="Fréchet distance + 2-D projection of embeddings")
    _add_common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--translated", required=True)
    p.add_argument("--direction", default="AtoB", choices=["AtoB", "BtoA"])
    p.add_argument("--method", default="tsne", choices=["tsne", "pca"])
    p.add_argument("--out", help="directory for the point table and figure")
    p.add_argument("--extractor", help="TorchScript embedding model (e.g. inception) instead of the encoder head")
    p.add_argument("--extractor-side", type=int, default=299)
    p.add_argument("--dataset", help="dataset name for the score ledger (default: config name)")
    return parser


def _run(args) -> None:
    overrides = list(args.overrides)
    if args.command == "train":
        if args.stage:
            overrides.append(f"stage.kind={args.stage}")
        if args.level is not None:
            overrides.append(f"stage.level={args.level}")
        if args.domain:
            overrides.append(f"stage.domain={args.domain}")
    cfg = load_config(args.config, overrides)
    workflow.log_effective_config(cfg, args.command)

    if args.command == "stats":
        workflow.run_stats(cfg, force=args.force)
    elif args.command == "train":
        if not cfg.stage.kind:
            raise ConfigError("stage.kind: pass --stage deepest|conditional|inverter")
        workflow.run_train(cfg, cfg.stage.kind, cfg.stage.level, cfg.stage.domain,
                           resume=args.resume, force=args.force, max_steps=args.max_steps)
    elif args.command == "translate":
        records = workflow.run_translate(cfg, args.inp, args.out, args.direction)
        ok = sum(r["status"] == "ok" for r in records)
        print(f"translated {ok} image(s), skipped {len(records) - ok}")
    elif args.command == "evaluate":
        res = workflow.run_evaluate(cfg, args.source, args.target, args.translated, args.direction,
                                    args.method, args.out, args.extractor, args.extractor_side, args.dataset)
        print(f"FD={res['score']:.6f} points={res['points']} figure={res['figure']}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _run(args)
    except Exception as exc:
        for types, code in EXIT_CODES:
            if isinstance(exc, types):
                print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
