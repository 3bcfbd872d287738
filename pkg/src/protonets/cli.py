"""Command-line entry point: ``protonets {gen-data,train,eval,grid,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import SyntheticSpec, gen_attribute_dataset, gen_gaussian_dataset, save_attribute_dataset, save_dataset
from .errors import ContractError, ProtonetError
from .harness import (PRESET_DIR, EvalReport, ExperimentConfig, evaluate_config, load_model, load_splits,
                      preset_path, run_grid, train)
from .selftest import run_all


def _csv_list(text: str | None, cast=str):
    return None if text is None else [cast(t) for t in text.split(",") if t]


def _config_path(path: str | None) -> Path:
    """A config file path, or the name of a bundled preset (``--config synthetic``)."""
    if not path:
        raise ContractError("--config is required")
    p = Path(path)
    if not p.exists() and p.suffix == "" and len(p.parts) == 1 and (PRESET_DIR / f"{path}.json").is_file():
        return preset_path(path)
    return p


def _load_config(path: str | None) -> tuple[ExperimentConfig, Path]:
    p = _config_path(path)
    # relative dataset paths resolve against the config's directory; for presets, the working directory
    base = Path.cwd() if p.parent == PRESET_DIR else p.resolve().parent
    return ExperimentConfig.from_json(p), base


def _apply_common(cfg: ExperimentConfig, args, spec_target: str) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.distance is not None and "," not in args.distance:
        cfg = replace(cfg, distance=args.distance)
    if args.head is not None and "," not in args.head:
        cfg = replace(cfg, head=args.head)
    spec_kw = {}
    for flag, field in (("way", "n_way"), ("shot", "n_support"), ("query", "n_query")):
        value = getattr(args, flag)
        if value is not None and "," not in str(value):
            spec_kw[field] = int(value)
    if spec_kw:
        cfg = cfg.with_train(**spec_kw) if spec_target == "train" else cfg.with_eval(**spec_kw)
    return cfg


def cmd_gen_data(args) -> int:
    path = _config_path(args.config)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ContractError(f"cannot read config {args.config}: {exc.strerror or exc}") from None
    ds = doc.get("dataset", doc)
    out = Path(args.out or "data")
    if "synthetic_attributes" in ds:
        kw = dict(ds["synthetic_attributes"])
        if args.seed is not None:
            kw["seed"] = args.seed
        path = save_attribute_dataset(gen_attribute_dataset(**kw), out)
    else:
        kw = dict(ds.get("synthetic", ds))
        if args.seed is not None:
            kw["seed"] = args.seed
        path = save_dataset(gen_gaussian_dataset(SyntheticSpec(**kw)), out)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg, base = _load_config(args.config)
    cfg = _apply_common(cfg, args, "train")
    if args.episodes is not None:
        cfg = replace(cfg, max_episodes=args.episodes)
    splits = load_splits(cfg, base)
    result = train(cfg, splits)
    out = Path(args.out or "model.pnck")
    result.model.save(out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    log_path.write_text(result.log_csv())
    last = result.log[-1][1] if result.log else float("nan")
    print(f"trained {len(result.log)} episodes, final loss {last:.6f}; checkpoint {out}, log {log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg, base = _load_config(args.config)
    cfg = _apply_common(cfg, args, "eval")
    if args.episodes is not None:
        cfg = replace(cfg, eval_episodes=args.episodes)
    splits = load_splits(cfg, base)
    model = load_model(cfg, splits, args.checkpoint)
    report = EvalReport([evaluate_config(model, cfg, splits, workers=args.workers)])
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_grid(args) -> int:
    cfg, base = _load_config(args.config)
    doc = json.loads(_config_path(args.config).read_text()).get("grid", {})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.episodes is not None:
        cfg = replace(cfg, max_episodes=args.episodes)
    report = run_grid(
        cfg,
        distances=_csv_list(args.distance) or doc.get("distance"),
        train_ways=_csv_list(args.way, int) or doc.get("train_way"),
        train_shots=_csv_list(args.shot, int) or doc.get("train_shot"),
        heads=_csv_list(args.head) or doc.get("head"),
        match_eval_shot=bool(doc.get("match_eval_shot", False)),
        splits=load_splits(cfg, base),
    )
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if all(r.error is None for r in report.rows) else 1


def cmd_selftest(args) -> int:
    results = run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file or bundled preset name")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--episodes", type=int, metavar="N")
    common.add_argument("--way", metavar="N")
    common.add_argument("--shot", metavar="N")
    common.add_argument("--query", metavar="N")
    common.add_argument("--distance", metavar="NAME")
    common.add_argument("--head", metavar="NAME")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="protonets", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset (manifest + PFT1 files)")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("train", parents=[common], help="train a model; writes a checkpoint and a loss log")
    p.add_argument("--log", metavar="PATH", help="training-log CSV (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint; writes a report CSV")
    p.add_argument("checkpoint")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("grid", parents=[common], help="train+evaluate over distance/way/shot/head axes")
    p.set_defaults(func=cmd_grid)
    p = sub.add_parser("selftest", parents=[common], help="run equivalence and gradient checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ProtonetError, ValueError, KeyError, TypeError) as exc:
        print(f"protonets {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
