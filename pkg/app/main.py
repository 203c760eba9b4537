"""Command line entrypoint for the FedSIS desk-scale lab."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List

import yaml
from dotenv import find_dotenv, load_dotenv

from . import __version__
from .config import LOG_LEVEL_ENV, MODES, ConfigError, ExperimentConfig, load_config
from . import runner

LOGGER = logging.getLogger(__name__)

# gen-data and inspect-checkpoint never train, so they fill the required keys.
NON_TRAINING_DEFAULTS = {"protocol.mode": "fedsis", "data.target": 0}


def _parse_seeds(value: str) -> List[int]:
    try:
        seeds = [int(part) for part in value.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("Seeds must be comma separated integers") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("At least one seed is required")
    return seeds


def _parse_value(value: str) -> Any:
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise argparse.ArgumentTypeError(f"Cannot parse sweep value '{value}'") from exc


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="Experiment YAML file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted override such as protocol.r_uni=10 (repeatable)")
    parser.add_argument("--mode", choices=MODES, default=None, help="Shortcut for protocol.mode")
    parser.add_argument("--target", type=int, default=None, help="Shortcut for data.target")
    parser.add_argument("--seeds", type=_parse_seeds, default=None, help="Comma separated seeds, e.g. 0,1,2")
    parser.add_argument("--output-dir", dest="output_dir", default=None, help="Shortcut for output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsis-lab",
        description="Federated split learning with intermediate representation sampling, at desk scale.")
    parser.add_argument(
        "--env-file",
        dest="env_file",
        default=None,
        help="Path to a .env file to load before starting")
    parser.add_argument(
        "--log-level",
        default="INFO",
        help="Log level (DEBUG, INFO, WARN, ERROR)")
    parser.add_argument(
        "--version",
        action="store_true",
        help="Print version and exit")

    verbs = parser.add_subparsers(dest="verb", metavar="VERB")

    run = verbs.add_parser("run", help="Train and evaluate one configuration over its seeds")
    _add_config_arguments(run)

    sweep = verbs.add_parser("sweep", help="Run one configuration per value of a config key")
    _add_config_arguments(sweep)
    sweep.add_argument("--axis", required=True, help="Dotted config key, e.g. protocol.r_uni")
    sweep.add_argument(
        "--values",
        nargs="+",
        type=_parse_value,
        required=True,
        help="Values for the axis, YAML scalars (e.g. 2 4 6 or '[1,3]')")

    inspect = verbs.add_parser("inspect-checkpoint", help="List the tensors stored in a checkpoint")
    inspect.add_argument("checkpoint", type=Path)

    features = verbs.add_parser("dump-features", help="Write target-domain features of a saved bundle")
    _add_config_arguments(features)
    features.add_argument("--checkpoint", type=Path, required=True)
    features.add_argument("--output", type=Path, required=True, help="Destination .npz file")
    features.add_argument("--seed", type=int, default=0, help="Seed of the inference stream")

    gen = verbs.add_parser("gen-data", help="Write the synthetic domains as dataset files")
    _add_config_arguments(gen)
    gen.add_argument("--data-dir", dest="data_dir", type=Path, required=True, help="Destination directory")
    return parser


def _load_env(env_file: str | None) -> Path | None:
    project_root = Path(__file__).resolve().parent.parent
    default_env = project_root / ".env"

    def _resolve_candidate(value: str | Path | None) -> Path | None:
        if not value:
            return None
        return Path(value).expanduser().resolve()

    if default_env.exists():
        selected: Path | None = default_env.resolve()
    else:
        candidates: list[Path | None] = [
            _resolve_candidate(env_file),
            _resolve_candidate(os.getenv("ENV_FILE")),
            _resolve_candidate(Path.cwd() / ".env"),
        ]
        discovered = find_dotenv(usecwd=True)
        if discovered:
            candidates.append(_resolve_candidate(discovered))
        selected = next((c for c in candidates if c and c.exists()), None)

    if selected:
        load_dotenv(selected, override=True)
    return selected


def _experiment_config(args: argparse.Namespace, defaults: Dict[str, Any] | None = None) -> ExperimentConfig:
    extra: Dict[str, Any] = {}
    if args.mode is not None:
        extra["protocol.mode"] = args.mode
    if args.target is not None:
        extra["data.target"] = args.target
    if args.seeds is not None:
        extra["seeds"] = args.seeds
    if args.output_dir is not None:
        extra["output_dir"] = args.output_dir
    return load_config(args.config, args.overrides, extra, defaults)


def _cmd_run(args: argparse.Namespace) -> int:
    outcome = runner.run_experiment(_experiment_config(args))
    for record in outcome.records:
        print(f"seed={record.seed} HTER={record.hter:.2f} AUC={record.auc:.2f} TPR@FPR={record.tpr_at_fpr:.2f}")
    print(f"Artifacts written to {outcome.run_dir}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    comparison, summary = runner.sweep(_experiment_config(args), args.axis, args.values)
    print(f"Sweep table: {comparison}")
    print(f"Sweep summary: {summary}")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    total = 0
    for name, shape, count in runner.inspect_checkpoint(args.checkpoint):
        print(f"{name}\t{list(shape)}\t{count}")
        total += count
    print(f"total\t{total}")
    return 0


def _cmd_dump_features(args: argparse.Namespace) -> int:
    path = runner.dump_features(_experiment_config(args), args.checkpoint, args.output, args.seed)
    print(f"Features written to {path}")
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    for path in runner.gen_data(_experiment_config(args, NON_TRAINING_DEFAULTS), args.data_dir):
        print(path)
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "inspect-checkpoint": _cmd_inspect,
    "dump-features": _cmd_dump_features,
    "gen-data": _cmd_gen_data,
}


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()

    # First pass to resolve env-file parameter without consuming the verb
    pre_args, _ = parser.parse_known_args(argv)
    _load_env(pre_args.env_file)
    env_log_level = os.getenv(LOG_LEVEL_ENV)
    if env_log_level:
        parser.set_defaults(log_level=env_log_level)

    args = parser.parse_args(argv)

    if args.version:
        print(__version__)
        return
    if not args.verb:
        parser.error("a verb is required (run, sweep, inspect-checkpoint, dump-features, gen-data)")

    log_level_value = getattr(logging, args.log_level.upper(), logging.INFO)
    logging.basicConfig(level=log_level_value, format="%(levelname)s %(name)s: %(message)s")

    try:
        code = COMMANDS[args.verb](args)
    except ConfigError as exc:
        LOGGER.error("Configuration error: %s", exc)
        print(f"Configuration error: {exc}", file=sys.stderr)
        raise SystemExit(2) from exc
    except Exception as exc:
        # Only emit full traceback when DEBUG logging is enabled
        if LOGGER.isEnabledFor(logging.DEBUG):
            LOGGER.exception("%s failed", args.verb)
        else:
            LOGGER.error("%s failed: %s", args.verb, exc)
        print(f"{args.verb} failed: {exc}", file=sys.stderr)
        raise SystemExit(1) from exc
    if code:
        raise SystemExit(code)


if __name__ == "__main__":  # pragma: no cover - manual execution
    main()
