"""
Command-line entry point.

    python -m src.cli featurize --config config/synthetic_benchmark.ini
    python -m src.cli evaluate --backend all --regime C2 --set training.epochs=5

Exit codes: 0 success, 1 internal error, 2 bad input/config/artifacts.
"""

import argparse
import logging
import sys
from typing import List, Optional

from src.config import load_config, parse_overrides
from src.errors import InputError, SceneSenseError
from src.evaluation import compare_reports, print_comparison_report, print_evaluation_report
from src.pipeline import BACKENDS, Pipeline

DEFAULT_CONFIG = "config/synthetic_benchmark.ini"

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="INI pipeline config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config key (repeatable)")
    common.add_argument("--epsilon", type=float, action="append", help="Threshold epsilon (repeatable)")
    common.add_argument("--threshold", type=float, help="Reconstruction-error threshold for the autoencoder")
    common.add_argument("--regime", choices=["C1", "C2"], help="Classifier training regime")
    common.add_argument("--seed", type=int, help="Run seed")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="scene-sense", description="Open-set acoustic scene classification")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[common], help="Write the synthetic dataset")
    commands.add_parser("featurize", parents=[common], help="Cache log-mel features and standardization stats")
    commands.add_parser("train-classifier", parents=[common], help="Train the closed-set classifier")
    commands.add_parser("train-autoencoder", parents=[common], help="Train the class-conditioned autoencoder")
    commands.add_parser("fit-openmax", parents=[common], help="Fit per-class Weibull tails")

    evaluate = commands.add_parser("evaluate", parents=[common], help="Score the test split")
    evaluate.add_argument("--backend", choices=list(BACKENDS) + ["all"], default="all")

    infer = commands.add_parser("infer", parents=[common], help="Classify standalone WAV files")
    infer.add_argument("clips", nargs="+", help="WAV files")
    infer.add_argument("--backend", choices=list(BACKENDS), default="c2ae")
    infer.add_argument("--output", help="Write decisions as TSV instead of printing")
    return parser


def _overrides(args: argparse.Namespace):
    overrides = parse_overrides(args.overrides)
    if args.epsilon:
        overrides.setdefault("threshold", {})["epsilons"] = ",".join(str(eps) for eps in args.epsilon)
    if args.threshold is not None:
        overrides.setdefault("c2ae", {})["threshold"] = str(args.threshold)
    if args.regime:
        overrides.setdefault("run", {})["regime"] = args.regime
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = str(args.seed)
    return overrides


def _run(args: argparse.Namespace) -> None:
    config = load_config(args.config, _overrides(args))
    pipeline = Pipeline(config)
    logger.info(f"{args.command}: regime {config.run.regime.value}, seed {config.run.seed}")

    if args.command == "generate":
        pipeline.generate()
    elif args.command == "featurize":
        pipeline.featurize()
    elif args.command == "train-classifier":
        pipeline.train_classifier()
    elif args.command == "train-autoencoder":
        pipeline.train_autoencoder()
    elif args.command == "fit-openmax":
        pipeline.fit_openmax()
    elif args.command == "evaluate":
        reports = pipeline.evaluate(args.backend)
        for report in reports:
            print_evaluation_report(report)
        print_comparison_report(compare_reports(reports))
    elif args.command == "infer":
        epsilon = args.epsilon[0] if args.epsilon else None
        table = pipeline.infer(args.clips, args.backend, epsilon)
        if args.output:
            table.to_csv(args.output, sep="\t", index=False, lineterminator="\n")
            logger.info(f"Decisions written to {args.output}")
        else:
            print(table.to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s")
    try:
        _run(args)
    except InputError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except SceneSenseError as e:
        logger.error(f"Internal error, {type(e).__name__}: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
