""" The ``fedaudit`` console script. """
import argparse
import sys

from loguru import logger

from .enumerations import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_VIOLATION
from .exceptions import ConfigError, DomainError, InvalidRecord, ShapeMismatch
from .harness import ExperimentConfig, bench, detect_sim, game_check, run_rounds


def build_parser():
    parser = argparse.ArgumentParser(prog="fedaudit",
                                     description="Selective testing of federated-learning workers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run-rounds", "run the protocol for the configured rounds"),
                            ("bench", "write the per-stage cost tables"),
                            ("detect-sim", "compare simulated and analytic detection"),
                            ("game-check", "check the deposit bound and best responses")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="JSON experiment configuration")
        cmd.add_argument("--seed", type=int, help="overrides the configured seed")
        cmd.add_argument("--out", help="output directory, overrides the configured one")
        cmd.add_argument("--verbose", "-v", action="count", default=0)
    return parser


def _configure_logging(verbose):
    level = {0: "WARNING", 1: "INFO"}.get(verbose, "DEBUG")
    logger.remove()
    logger.add(sys.stderr, level=level)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        if args.config:
            config = ExperimentConfig.from_json(args.config, seed=args.seed, out=args.out)
        else:
            config = ExperimentConfig.from_dict({}, seed=args.seed, out=args.out)
    except (ConfigError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR

    try:
        if args.command == "run-rounds":
            report = run_rounds(config, config.out)
            if report["slashed"]:
                logger.warning(f"Slashed workers: {', '.join(report['slashed'])}")
                return EXIT_VIOLATION
        elif args.command == "bench":
            bench(config, config.out)
        elif args.command == "detect-sim":
            detect_sim(config, config.out)
        else:
            _, violations = game_check(config, config.out)
            if violations:
                return EXIT_VIOLATION
    except (ConfigError, InvalidRecord, ShapeMismatch, DomainError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
