"""Command-line front end.

Subcommands cover the full pipeline — ``generate`` (datasets), ``pretrain``,
``finetune``, ``adapt`` (test-time strategies), ``evaluate`` (multi-seed
strategy comparison), ``ablate`` (pretext-weight x adaptation grid),
``gradcheck`` (finite-difference audit), and ``report`` (render + verify a
persisted report).

Every command is deterministic given ``--config`` and ``--seed``: repeated
invocations reproduce all emitted metric values bit for bit.  Failures exit
nonzero after printing a single machine-readable JSON error record to stderr.
The ``TTALIGN_WORKERS`` environment variable sets the worker-pool size for
multi-seed commands.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .adapt import TentConfig, TttConfig, run_adaptation
from .errors import ConfigError, ContractError, ShapeError
from .gradcheck import TOLERANCE, max_relative_error, run_gradcheck
from .harness import (
    STRATEGIES,
    ExperimentConfig,
    _evaluate,
    _finetune,
    _model_config,
    _prepare_base_model,
    build_splits,
    config_hash,
    emit_report,
    preset_experiment,
    run_ablation,
    run_experiment,
)
from .nn import Model, save_checkpoint
from .pretext import task_spec_for
from .signals import TASKS, ShiftSpec, save_split
from .training import FinetuneConfig, PretrainConfig, masked_pretrain

_NESTED = {
    "finetune": FinetuneConfig,
    "pretrain": PretrainConfig,
    "ttt": TttConfig,
    "tent": TentConfig,
    "shift": ShiftSpec,
}
_ADAPT_STRATEGIES = ("none", "ttt_ssl", "tent")
_FINETUNE_STRATEGIES = ("supervised_only", "stage1_ssl")


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

def _tuplify(obj):
    if isinstance(obj, list):
        return tuple(_tuplify(v) for v in obj)
    return obj


def load_config_file(path: Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def build_config(args) -> ExperimentConfig:
    """Preset for the task, then file overrides, then flag overrides."""
    file_cfg = load_config_file(args.config) if args.config else {}
    task = args.task or file_cfg.get("task") or "syn_mi"
    if task not in TASKS:
        raise ConfigError(f"unknown task '{task}' (expected one of {TASKS})")

    known = {f.name for f in fields(ExperimentConfig)}
    base = preset_experiment(task)
    overrides = {}
    for key, value in file_cfg.items():
        if key == "task":
            continue
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        if key in _NESTED:
            if value is None:
                overrides[key] = None
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{key}' must be an object or null")
            current = getattr(base, key)
            merged = dict(asdict(current)) if current is not None else {}
            merged.update(value)
            try:
                overrides[key] = _NESTED[key](**{k: _tuplify(v) for k, v in merged.items()})
            except TypeError as exc:
                raise ConfigError(f"bad fields for '{key}': {exc}")
        else:
            overrides[key] = _tuplify(value)
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    return preset_experiment(task, **overrides)


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.base_seed


def _out_dir(args) -> Path:
    out = args.out if args.out is not None else Path("runs") / args.command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    cfg = build_config(args)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    splits = build_splits(cfg, seed)
    summary = {}
    for name, (X, y, subj) in splits.items():
        meta = {"task": cfg.task, "split": name, "seed": seed, "config_hash": config_hash(cfg)}
        save_split(out, name, X, y, subj, meta)
        counts = {int(c): int(n) for c, n in zip(*np.unique(y, return_counts=True))}
        summary[name] = {"epochs": int(X.shape[0]), "class_counts": counts}
    manifest = {
        "command": "generate",
        "task": cfg.task,
        "protocol": cfg.protocol,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "splits": summary,
    }
    _write_json(out / "manifest.json", manifest)
    _emit(manifest)


def cmd_pretrain(args) -> None:
    cfg = build_config(args)
    if cfg.pretrain is None:
        raise ConfigError("pretraining is disabled in this config ('pretrain': null)")
    seed = _seed(args, cfg)
    out = _out_dir(args)
    splits = build_splits(cfg, seed)
    spec = task_spec_for(cfg.task)
    model = Model(_model_config(cfg, spec, seed))
    model, history = masked_pretrain(model, splits["train"][0], replace(cfg.pretrain, seed=seed))
    save_checkpoint(model, out / "pretrained.ckpt")
    _write_json(out / "pretrain_history.json", history)
    _emit(
        {
            "command": "pretrain",
            "task": cfg.task,
            "seed": seed,
            "config_hash": config_hash(cfg),
            "epochs": len(history),
            "final_recon_loss": history[-1]["recon_loss"],
            "checkpoint": str(out / "pretrained.ckpt"),
        }
    )


def cmd_finetune(args) -> None:
    cfg = build_config(args)
    strategy = args.strategy or "stage1_ssl"
    seed = _seed(args, cfg)
    out = _out_dir(args)
    splits = build_splits(cfg, seed)
    spec = task_spec_for(cfg.task)
    weights = (0.0, 0.0) if strategy == "supervised_only" else spec.weights
    base = _prepare_base_model(cfg, spec, seed, splits["train"][0])
    model, history = _finetune(cfg, spec, base, weights, seed, splits)
    ckpt = out / f"checkpoint_{strategy}.ckpt"
    save_checkpoint(model, ckpt)
    _write_json(out / f"finetune_history_{strategy}.json", history)
    _emit(
        {
            "command": "finetune",
            "task": cfg.task,
            "strategy": strategy,
            "seed": seed,
            "config_hash": config_hash(cfg),
            "val_best": float(max(h["val_score"] for h in history)),
            "monitor": history[-1]["monitor"],
            "checkpoint": str(ckpt),
        }
    )


def cmd_adapt(args) -> None:
    cfg = build_config(args)
    strategy = args.strategy or "none"
    seed = _seed(args, cfg)
    out = _out_dir(args)
    splits = build_splits(cfg, seed)
    spec = task_spec_for(cfg.task)
    base = _prepare_base_model(cfg, spec, seed, splits["train"][0])
    model, _ = _finetune(cfg, spec, base, spec.weights, seed, splits)
    X_test, y_test, _ = splits["test"]
    probs, records = run_adaptation(
        strategy, model, spec, X_test, ttt=replace(cfg.ttt, seed=seed), tent=cfg.tent
    )
    result = _evaluate(spec, y_test, probs)
    _write_json(out / f"metrics_{strategy}.json", result.as_dict())
    _write_json(out / f"adaptation_log_{strategy}.json", records)
    _emit(
        {
            "command": "adapt",
            "task": cfg.task,
            "strategy": strategy,
            "seed": seed,
            "config_hash": config_hash(cfg),
            "metrics": result.as_dict()["values"],
            "adaptation_records": len(records),
        }
    )


def cmd_evaluate(args) -> None:
    cfg = build_config(args)
    if args.strategy is not None:
        cfg = replace(cfg, strategies=(args.strategy,))
    out = _out_dir(args)
    report = run_experiment(cfg)
    paths = emit_report(report, out)
    _print_aggregate_table(report)
    for path in paths:
        print(f"wrote {path}")


def cmd_ablate(args) -> None:
    cfg = build_config(args)
    out = _out_dir(args)
    report = run_ablation(cfg)
    paths = emit_report(report, out)
    _print_aggregate_table(report)
    for path in paths:
        print(f"wrote {path}")


def cmd_gradcheck(args) -> None:
    out = _out_dir(args)
    start = time.perf_counter()
    results = run_gradcheck()
    elapsed = time.perf_counter() - start
    worst = max_relative_error(results)
    payload = {
        "command": "gradcheck",
        "tolerance": TOLERANCE,
        "max_relative_error": worst,
        "seconds": elapsed,
        "per_tensor": results,
    }
    _write_json(out / "gradcheck.json", payload)
    _emit({k: v for k, v in payload.items() if k != "per_tensor"})
    if worst >= TOLERANCE:
        raise ContractError(
            f"gradient check failed: max relative error {worst:.3e} >= {TOLERANCE:.0e}"
        )


def cmd_report(args) -> None:
    out = Path(args.out) if args.out is not None else Path("runs") / "evaluate"
    candidates = sorted(out.glob("experiment_*.json")) + sorted(out.glob("ablation_*.json"))
    if args.task:
        candidates = [p for p in candidates if p.stem.endswith(args.task)]
    if not candidates:
        raise ConfigError(f"no report JSON found under {out}")
    if len(candidates) > 1:
        names = ", ".join(p.name for p in candidates)
        raise ConfigError(f"multiple reports under {out} ({names}); pick one with --task")
    data = json.loads(candidates[0].read_text())
    _verify_aggregates(data)
    print(f"report {candidates[0]}  kind={data['kind']}  task={data['task']}  "
          f"config={data['config_hash']}  seeds={data['seeds']}")
    _print_table_from_dict(data)
    print("aggregates verified against per-seed rows (tolerance 1e-12)")


# ---------------------------------------------------------------------------
# report rendering and verification
# ---------------------------------------------------------------------------

def _iter_aggregate_rows(data: dict):
    """Yield (label, metric, stats, per_seed_values) for experiment or ablation dicts."""
    if data["kind"] == "experiment":
        for strategy, metrics in data["aggregates"].items():
            for metric, stats in metrics.items():
                vals = [
                    rec["strategies"][strategy]["metrics"]["values"][metric]
                    for rec in data["per_seed"]
                ]
                yield strategy, metric, stats, vals
    else:
        for row, columns in data["aggregates"].items():
            for column, metrics in columns.items():
                for metric, stats in metrics.items():
                    vals = [
                        rec["cells"][column]["values"][metric]
                        for rec in data["per_seed"]
                        if rec["row"] == row
                    ]
                    yield f"{row}/{column}", metric, stats, vals


def _verify_aggregates(data: dict) -> None:
    for label, metric, stats, vals in _iter_aggregate_rows(data):
        if abs(stats["mean"] - np.mean(vals)) > 1e-12 or abs(stats["std"] - np.std(vals)) > 1e-12:
            raise ContractError(
                f"aggregate for {label}/{metric} does not match its per-seed rows"
            )


def _print_table_from_dict(data: dict) -> None:
    rows = [(label, metric, stats) for label, metric, stats, _ in _iter_aggregate_rows(data)]
    if not rows:
        print("(empty report)")
        return
    width = max(len(label) for label, _, _ in rows)
    mwidth = max(len(metric) for _, metric, _ in rows)
    for label, metric, stats in rows:
        print(f"{label:<{width}}  {metric:<{mwidth}}  {stats['mean']:.4f} +/- {stats['std']:.4f}")


def _print_aggregate_table(report) -> None:
    print(f"{report.kind} {report.task}  config={report.config_hash}  seeds={report.seeds}")
    _print_table_from_dict(report.to_dict())


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttalign",
        description="Two-stage alignment experiments on synthetic multichannel signals.",
        epilog="Set TTALIGN_WORKERS to control the worker-pool size for multi-seed runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str, strategy_choices: tuple[str, ...] | None = None):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, default=None,
                        help="JSON file with experiment-config overrides")
        sp.add_argument("--task", choices=TASKS, default=None,
                        help="task preset (default: config file's task, else syn_mi)")
        sp.add_argument("--seed", type=int, default=None,
                        help="seed (single-run commands) or base seed (multi-seed commands)")
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: runs/<command>)")
        if strategy_choices is not None:
            sp.add_argument("--strategy", choices=strategy_choices, default=None)
        return sp

    add("generate", "generate and save the train/val/test splits")
    add("pretrain", "masked-reconstruction pretraining of the backbone")
    add("finetune", "stage-1 fine-tuning (supervised or with pretext heads)",
        _FINETUNE_STRATEGIES)
    add("adapt", "fine-tune, then apply a test-time strategy to the test split",
        _ADAPT_STRATEGIES)
    add("evaluate", "multi-seed strategy comparison; emits CSV + JSON reports", STRATEGIES)
    add("ablate", "pretext-weight x adaptation grid; emits a matrix report")
    add("gradcheck", "finite-difference audit of every gradient path")
    add("report", "render a persisted report and verify its aggregates")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _HANDLERS[args.command](args)
        return 0
    except ConfigError as exc:
        _error_record(args.command, exc)
        return 2
    except (ContractError, ShapeError) as exc:
        _error_record(args.command, exc)
        return 3
    except OSError as exc:
        _error_record(args.command, exc)
        return 4


def _error_record(command: str, exc: Exception) -> None:
    record = {"error": type(exc).__name__, "message": str(exc), "command": command}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
