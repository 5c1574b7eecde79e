#!/usr/bin/env python3
"""Run the preset strategy comparison (and optional ablation grid) for one task.

Usage:
    python3 scripts/strategy_table.py                       # syn_mi presets
    python3 scripts/strategy_table.py --task syn_stress --seeds 3
    python3 scripts/strategy_table.py --ablate              # pretext-weight grid

A thin convenience wrapper over the library; the ``ttalign`` CLI offers the
same runs with file outputs (``ttalign evaluate`` / ``ttalign ablate``).
"""

from __future__ import annotations

import argparse
import sys

from ttalign.harness import (
    TASKS,
    preset_experiment,
    run_ablation,
    run_experiment,
)


def print_aggregates(title: str, aggregates: dict) -> None:
    print(title)
    for label, metrics in aggregates.items():
        for metric, stats in sorted(metrics.items()):
            print(f"  {label:22s} {metric:18s} {stats['mean']:.4f} +/- {stats['std']:.4f}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--task", choices=TASKS, default="syn_mi")
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--ablate", action="store_true",
                        help="run the pretext-weight x adaptation grid instead")
    args = parser.parse_args(argv)

    cfg = preset_experiment(args.task, n_seeds=args.seeds)
    if args.ablate:
        report = run_ablation(cfg)
        rows = {
            f"{row}/{strategy}": metrics
            for row, strategies in report.aggregates.items()
            for strategy, metrics in strategies.items()
        }
        print_aggregates(f"ablation grid on {args.task} ({args.seeds} seeds)", rows)
    else:
        report = run_experiment(cfg)
        print_aggregates(f"strategies on {args.task} ({args.seeds} seeds)", report.aggregates)
    print(f"wall time: {report.wall_time:.1f} s  (config {report.config_hash[:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
