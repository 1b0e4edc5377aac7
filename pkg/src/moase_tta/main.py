"""CLI entrypoint for moase_tta."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .config import ConfigError, ExperimentConfig, load_config, named_stream
from .daopd import BENCHMARK_PRESETS, AdaptMode, NumericAbortError
from .episode import diagnose, parse_values, pretrain_source, run_episode, sweep
from .log_utils import DEFAULT_LOG_PATH, ensure_log_path, write_log
from .model import ModelPair, load_checkpoint, save_checkpoint
from .numeric import DomainError, configure_determinism

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

MODES = [mode.value for mode in AdaptMode]


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON or YAML experiment config.")
    common.add_argument("--preset", choices=sorted(BENCHMARK_PRESETS), default=None, help="DA-OPD defaults profile.")
    common.add_argument("--seed", type=int, default=None, help="Stream and model seed.")
    common.add_argument("--rounds", type=int, default=None, help="Times the domain sequence is cycled.")
    common.add_argument("--stream", default=None, help="'default' or a single corruption family.")
    common.add_argument("--out", type=Path, default=Path("runs"), help="Output directory.")
    common.add_argument("--log-path", type=Path, default=DEFAULT_LOG_PATH, help="Log file path.")

    parser = argparse.ArgumentParser(description="Continual test-time adaptation with MoASE and DA-OPD.")
    sub = parser.add_subparsers(dest="command", required=True)

    pretrain = sub.add_parser("pretrain", parents=[common], help="Train the source model and save it.")
    pretrain.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint path (default <out>/source.pt).")

    adapt = sub.add_parser("adapt", parents=[common], help="Run one evaluate-then-adapt episode.")
    adapt.add_argument("--mode", choices=MODES, default=AdaptMode.MOASE_PLUS.value)
    adapt.add_argument("--checkpoint", type=Path, default=None, help="Source checkpoint (pretrains when absent).")
    adapt.add_argument("--frozen-eval", action="store_true", help="Evaluate the checkpoint without adapting.")

    sweep_cmd = sub.add_parser("sweep", parents=[common], help="One episode per value of a parameter.")
    sweep_cmd.add_argument("--param", required=True, help="Field name, e.g. ema_alpha or model.num_experts.")
    sweep_cmd.add_argument("--values", required=True, help="Comma-separated values.")
    sweep_cmd.add_argument("--mode", choices=MODES, default=AdaptMode.MOASE_PLUS.value)

    diag = sub.add_parser("diag", parents=[common], help="JS/IC series and the target-error bound report.")
    diag.add_argument("--mode", choices=MODES, default=AdaptMode.MOASE_PLUS.value)
    diag.add_argument("--checkpoint", type=Path, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config, preset=args.preset)
    stream = config.stream
    if args.seed is not None:
        stream = replace(stream, seed=args.seed)
    if args.rounds is not None:
        stream = replace(stream, rounds=args.rounds)
    if args.stream is not None:
        stream = replace(stream, domains=named_stream(args.stream, stream.domains[0].duration))
    config.stream = stream
    config.validate()
    return config


def source_pair(args: argparse.Namespace, config: ExperimentConfig, log_path: Path) -> ModelPair:
    checkpoint: Optional[Path] = getattr(args, "checkpoint", None)
    if checkpoint is not None:
        if not checkpoint.exists():
            raise ConfigError("checkpoint not found", field_path=str(checkpoint))
        return load_checkpoint(checkpoint, log_path)
    return pretrain_source(config, log_path).pair


def _run(args: argparse.Namespace, log_path: Path) -> int:
    config = resolve_config(args)
    out: Path = args.out

    if args.command == "pretrain":
        result = pretrain_source(config, log_path)
        path = save_checkpoint(result.pair, args.checkpoint or out / "source.pt", log_path)
        print(f"source accuracy {result.accuracy:.4f} after {result.steps} steps -> {path}")
        return EXIT_OK

    if args.command == "sweep":
        rows = sweep(config, args.param, parse_values(args.values), mode=args.mode, out_dir=out, log_path=log_path)
        for row in rows:
            print(f"{row['param']}={row['value']}: mean error {row['mean_error']:.4f}")
        return EXIT_OK

    pair = source_pair(args, config, log_path)
    if args.command == "diag":
        metrics, report = diagnose(config, pair, args.mode, out_dir=out, log_path=log_path)
        print(
            f"mean error {metrics.mean_error:.4f}; bound eps_T={report.eps_target:.4f} "
            f"eps_S={report.eps_source:.4f} d={report.divergence:.4f} slack={report.slack:.4f}"
        )
        return EXIT_OK

    mode = AdaptMode.SOURCE_FROZEN if args.frozen_eval else AdaptMode(args.mode)
    metrics = run_episode(config, pair, mode, out_dir=out, log_path=log_path)
    for row in metrics.summary:
        print(f"round {row.round} {row.domain:<12} error {row.mean_error:.4f} js {row.js:.4f} ic {row.ic:.4f}")
    print(f"{mode.value}: mean error {metrics.mean_error:.4f}")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG

    log_path = ensure_log_path(args.log_path)
    write_log(f"moase_tta {args.command} starting", log_path)
    configure_determinism()
    try:
        return _run(args, log_path)
    except (ConfigError, DomainError) as exc:
        write_log(f"Config error: {exc}", log_path)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbortError as exc:
        write_log(f"Numeric abort at step {exc.step}: {exc}", log_path)
        print(f"numeric abort at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
