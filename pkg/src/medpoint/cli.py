"""Command-line driver.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical fault.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from . import datagen, geometry
from .nn.checkpoint import CheckpointError
from .nn.optim import TrainingFault
from .train import (
    ConfigError,
    RunConfig,
    evaluate,
    load_run_checkpoint,
    eval_seed,
    train,
    write_completion_plys,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
TEST_FOLD = datagen.FOLD_ROLES["test"]


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    result = train(cfg)
    print(f"best checkpoint: {result.best_path}")
    print(f"final checkpoint: {result.final_path}")
    print(result.test_report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    model, cfg, meta, _ = load_run_checkpoint(ckpt)
    if cfg.task != args.task:
        raise UsageError(f"checkpoint was trained for task {cfg.task!r}, not {args.task!r}")
    kind = {"classify": "shapes", "segment": "nested", "complete": "completion"}[cfg.task]
    try:
        ds = datagen.load_dataset(args.data, kind)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load dataset {args.data}: {exc}") from None
    if (cfg.task == "complete") != (ds.targets is not None):
        raise UsageError(f"dataset {args.data} does not fit task {cfg.task!r}")
    idx = np.flatnonzero(np.isin(ds.fold_of, TEST_FOLD))
    if len(idx) == 0:
        raise UsageError(f"dataset {args.data} has no samples in the test fold")
    report, res = evaluate(model, ds, idx, cfg.batch_size, cfg.data["input_points"],
                           eval_seed(cfg))
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{cfg.task}"
    report.write(out)
    if cfg.task == "complete":
        write_completion_plys(out / "predictions", res["pred"], [ds.sample_ids[i] for i in idx])
    print(report.to_text(), end="")
    return EXIT_OK


def scan_colors(n: int) -> np.ndarray:
    """Blue (first) to red (last) ramp over scan positions."""
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    return np.stack([255 * t, 64 * np.ones(n), 255 * (1 - t)], axis=1).round().astype(np.int64)


def cmd_scan_debug(args) -> int:
    try:
        cloud = datagen.io_read(args.inp)
    except OSError as exc:
        raise UsageError(f"cannot read {args.inp}: {exc}") from None
    try:
        scan = geometry.make_scan(cloud.coords, args.strategy)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    stem = Path(args.out) if args.out else Path(args.inp).with_suffix("")
    stem = stem.parent / f"{stem.name}.{scan.name}"
    order_text = "\n".join(str(int(i)) for i in scan.order) + "\n"
    stem.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{stem}.order.txt").write_text(order_text)
    colors = np.empty((len(scan.order), 3), dtype=np.int64)
    colors[scan.order] = scan_colors(len(scan.order))
    datagen.write_ply(f"{stem}.ply", cloud.coords, colors)
    sys.stdout.write(order_text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        spec = yaml.safe_load(Path(args.spec).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read spec {args.spec}: {exc}") from None
    if not isinstance(spec, dict):
        raise UsageError("generator spec must be a mapping")
    spec = dict(spec)
    out = args.out or spec.pop("out", None)
    spec.pop("out", None)
    if out is None:
        raise UsageError("gen-data needs an output directory (--out or 'out' in the spec)")
    try:
        spec = datagen.data_spec(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = datagen.generate_dataset(spec, int(spec["seed"] or 0))
    manifest = datagen.export_dataset(ds, out)
    print(f"wrote {len(ds)} samples, manifest {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="medpoint", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train a model from a YAML run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="evaluate a checkpoint on the test fold of a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", required=True, choices=("classify", "complete", "segment"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    s = sub.add_parser("scan-debug", help="dump a scan order and a position-coloured PLY")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--strategy", required=True)
    s.add_argument("--out", help="output stem (default: next to the input)")
    s.set_defaults(func=cmd_scan_debug)
    g = sub.add_parser("gen-data", help="generate a synthetic dataset from a YAML spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, datagen.ParseError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except TrainingFault as exc:
        _err(f"numerical fault: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
