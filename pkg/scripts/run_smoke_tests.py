#!/usr/bin/env python3
"""Quick smoke test for the moase_tta stack: pretrain, then one short episode."""

from __future__ import annotations

import argparse
from pathlib import Path

from moase_tta.config import default_domains, load_config
from moase_tta.episode import pretrain_source, run_episode
from moase_tta.log_utils import DEFAULT_LOG_PATH, ensure_log_path, write_log


def main() -> None:
    parser = argparse.ArgumentParser(description="Run a short moase_tta episode end to end.")
    parser.add_argument("--mode", default="moase++", help="Adaptation mode.")
    parser.add_argument("--batches", type=int, default=5, help="Batches per domain.")
    parser.add_argument("--seed", type=int, default=1, help="Stream seed.")
    parser.add_argument("--out", type=Path, default=None, help="Optional output directory.")
    args = parser.parse_args()

    log_path = ensure_log_path(DEFAULT_LOG_PATH)
    config = load_config()
    config.stream.seed = args.seed
    config.stream.domains = default_domains(duration=args.batches)
    write_log(f"Smoke test: mode={args.mode} batches={args.batches}", log_path)
    source = pretrain_source(config, log_path)
    print(f"source accuracy {source.accuracy:.4f}")
    metrics = run_episode(config, source.pair, args.mode, out_dir=args.out, log_path=log_path)
    print(f"{args.mode}: mean error {metrics.mean_error:.4f} over {len(metrics.records)} steps")


if __name__ == "__main__":
    main()
