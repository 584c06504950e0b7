"""Command line front end.

Subcommands: build, train, eval, audit, verify. Output is deterministic for
fixed flags; JSON records are emitted with sorted keys. Exit codes: 0 on
success, 1 when a check or training target fails, 2 for configuration
errors (argparse uses 2 as well).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .audit import audit_model, verify_spike_driven
from .config import (
    TrainConfig,
    config_digest,
    load_config_file,
    model_config_from_values,
    registry_config,
    train_config_from_values,
)
from .data import SyntheticSpec, generate_split, load_dataset, save_dataset
from .model import build, load_checkpoint, save_checkpoint
from .tensor import ConfigError, EngineError
from .training import evaluate, train
from .verification import SUITES, run_suites

_ARCHES = ("Ti", "S", "M", "L", "Nano")


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


def _model_cfg(args):
    """Model config plus any train keys found in a config file."""
    if getattr(args, "config", None):
        values = load_config_file(args.config)
        cfg = model_config_from_values(values)
    elif getattr(args, "arch", None):
        values = {}
        cfg = registry_config(args.arch)
    else:
        raise ConfigError("provide --arch or --config")
    if getattr(args, "time_steps", None):
        cfg = dataclasses.replace(cfg, time_steps=args.time_steps)
    return cfg, values


def _train_cfg(args, file_values) -> TrainConfig:
    cfg = train_config_from_values(file_values)
    overrides = {}
    for flag, fieldname in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("lr", "lr"),
        ("seed", "seed"),
        ("target_acc", "target_train_acc"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[fieldname] = val
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _dataset_for(args, cfg, split: str):
    if getattr(args, "dataset", None):
        ds = load_dataset(args.dataset)
        return ds
    spec = SyntheticSpec(
        classes=cfg.num_classes,
        channels=cfg.in_channels,
        height=cfg.input_height,
        width=cfg.input_width,
        noise=getattr(args, "noise", 0.3),
        seed=getattr(args, "data_seed", 0),
    )
    count = args.train_count if split == "train" else args.test_count
    return generate_split(spec, count, split)


def cmd_build(args) -> int:
    cfg, _ = _model_cfg(args)
    model = build(cfg, seed=args.seed)
    print(f"arch: {cfg.name}")
    print(f"config_digest: {config_digest(cfg)}")
    if args.table:
        for name, size in model.param_table():
            print(f"  {name}  {size}")
    print(f"parameters: {model.param_count()}")
    if args.out:
        save_checkpoint(model, args.out)
        print(f"checkpoint: {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg, file_values = _model_cfg(args)
    tcfg = _train_cfg(args, file_values)
    model = build(cfg, seed=tcfg.seed)
    train_ds = _dataset_for(args, cfg, "train")
    eval_ds = None if args.dataset else _dataset_for(args, cfg, "test")
    result = train(
        model,
        train_ds,
        tcfg,
        eval_ds=eval_ds,
        log_path=args.log,
        checkpoint_path=args.out,
    )
    _print_json(
        {
            "diverged": result.diverged,
            "epochs_run": result.epochs_run,
            "eval_acc": result.eval_accuracy,
            "stopped_early": result.stopped_early,
            "train_acc": result.train_accuracy,
        }
    )
    if result.diverged:
        return 1
    if tcfg.target_train_acc is not None and result.train_accuracy < tcfg.target_train_acc:
        return 1
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.dataset:
        ds = load_dataset(args.dataset)
    else:
        cfg = model.config
        spec = SyntheticSpec(
            classes=cfg.num_classes,
            channels=cfg.in_channels,
            height=cfg.input_height,
            width=cfg.input_width,
            noise=args.noise,
            seed=args.data_seed,
        )
        ds = generate_split(spec, args.test_count, "test")
    acc = evaluate(model, ds.images, ds.labels, batch_size=args.batch_size)
    _print_json({"count": len(ds), "eval_acc": acc})
    return 0


def cmd_audit(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        cfg = model.config
    else:
        cfg, _ = _model_cfg(args)
        model = build(cfg, seed=args.seed)
    ds = _dataset_for(args, cfg, "test")
    images = ds.images[: args.batch]
    report = audit_model(model, images)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_jsonl())
    _print_json(report.totals_dict())
    if args.check_equivalence:
        eq = verify_spike_driven(model, images[: min(args.batch, 2)])
        _print_json({"equivalence_passed": eq.passed, "tolerance": eq.tolerance})
        if not eq.passed:
            return 1
    return 0


def cmd_verify(args) -> int:
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    rows = run_suites(names, samples=args.samples, seed=args.seed, jobs=args.jobs, fx=args.fx, m=args.m)
    for row in rows:
        _print_json(row)
    if args.out:
        with open(args.out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    failed = [r for r in rows if not r["passed"]]
    _print_json({"cases": len(rows), "failed": len(failed), "suites": names})
    return 1 if failed else 0


def cmd_dataset(args) -> int:
    spec = SyntheticSpec(noise=args.noise, seed=args.data_seed)
    ds = generate_split(spec, args.count, args.split)
    save_dataset(args.out, ds)
    _print_json({"count": len(ds), "path": args.out, "split": args.split})
    return 0


def _add_model_flags(p, with_seed=True):
    p.add_argument("--arch", choices=_ARCHES, help="registry architecture")
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--time-steps", type=int, dest="time_steps")
    if with_seed:
        p.add_argument("--seed", type=int, default=0)


def _add_data_flags(p):
    p.add_argument("--dataset", help="dataset container file; omit for synthetic data")
    p.add_argument("--train-count", type=int, default=320, dest="train_count")
    p.add_argument("--test-count", type=int, default=160, dest="test_count")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--data-seed", type=int, default=0, dest="data_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualspike", description="Spiking attention network tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="construct a model and report its size")
    _add_model_flags(p)
    p.add_argument("--table", action="store_true", help="print the per-parameter listing")
    p.add_argument("--out", help="write an initial checkpoint")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="train on a dataset")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--target-acc", type=float, dest="target_acc")
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--test-count", type=int, default=160, dest="test_count")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--data-seed", type=int, default=0, dest="data_seed")
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="spike-driven compute audit")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--out", help="JSONL per-layer rows")
    p.add_argument("--check-equivalence", action="store_true", dest="check_equivalence")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify", help="statistical and numerical verification")
    p.add_argument("suite", choices=sorted(SUITES) + ["all"])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--fx", type=float, help="override the firing-rate grid (theorem1)")
    p.add_argument("--m", type=int, help="override the fan-in grid (theorem1)")
    p.add_argument("--out", help="JSONL case records")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dataset", help="write a synthetic dataset container")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--data-seed", type=int, default=0, dest="data_seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
