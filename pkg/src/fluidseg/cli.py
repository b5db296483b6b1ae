"""Command line entry point.

Subcommands: gen-data, train, eval, verify, report.  Exit codes: 0 success,
1 verification failure, 2 bad configuration, 3 data or IO problem,
4 training divergence.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from ._kernels import get_backend
from .errors import ConfigError, DataError, DivergenceError, FormatError
from .evalmetrics import ReportRow, append_row_csv, emit_report, read_rows_csv
from .model import load_checkpoint
from .runconfig import (RunConfig, apply_override, load_config_file,
                        save_config_file)
from .synthdata import (generate_dataset, load_dataset, load_splits,
                        make_splits, save_splits)
from .trainer import REGIMES, WEAK_TIERS, evaluate_ids, fit
from .verify import SUITES, run_suite


def _config_from_args(args) -> RunConfig:
    cfg = load_config_file(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        apply_override(cfg, key.strip(), raw)
    return cfg


def _add_config_flags(p):
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a single config value (repeatable)")


def _pick_split(splits, split_id: int):
    for s in splits:
        if s.split_id == split_id:
            return s
    raise ConfigError(f"split {split_id} not found "
                      f"(available: {[s.split_id for s in splits]})")


def _subset_ids(dataset, split, subset: str):
    volumes = set(split.val_volumes if subset == "val" else split.test_volumes)
    return [r.id for r in dataset.records if r.volume in volumes]


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        apply_override(cfg, "dataset.seed", str(args.seed))
    out = Path(args.out)
    manifest = generate_dataset(cfg.scene, out, seed=cfg.dataset.seed,
                                n_volumes=cfg.dataset.n_volumes,
                                scans_per_volume=cfg.dataset.scans_per_volume)
    dataset = load_dataset(out)
    splits = make_splits(dataset, n_splits=cfg.split.n_splits,
                         n_val=cfg.split.n_val, n_test=cfg.split.n_test,
                         budgets=cfg.split.budgets, seed=cfg.split.seed)
    save_splits(splits, out / "splits.json", cfg.split.seed)
    save_config_file(cfg, out / "runconfig.json")
    print(f"wrote {len(manifest['records'])} scans over "
          f"{cfg.dataset.n_volumes} volumes and {len(splits)} splits to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    for key, value in (("train.regime", args.regime),
                       ("train.weak_tier", args.weak_tier),
                       ("train.seed", args.seed)):
        if value is not None:
            apply_override(cfg, key, str(value))
    dataset = load_dataset(args.data)
    splits_path = args.splits_file or Path(args.data) / "splits.json"
    split = _pick_split(load_splits(splits_path), args.split)

    def progress(epoch, total, row, state):
        if row.val_miou is not None:
            print(f"epoch {epoch + 1}/{total}  val miou {row.val_miou:.4f}")
        elif args.progress:
            print(f"epoch {epoch + 1}/{total}  loss {row.loss_total:.4f}")

    t0 = time.perf_counter()
    result = fit(cfg.train, cfg.model, dataset, split, args.budget,
                 out_dir=args.out, progress=progress)
    dt = time.perf_counter() - t0
    best = "n/a" if result.best_val is None else f"{result.best_val:.4f}"
    print(f"trained {cfg.train.regime}/{cfg.train.weak_tier} budget "
          f"{args.budget} split {args.split} in {dt:.1f}s; "
          f"best val miou {best}; wrote {Path(args.out) / 'best.fseg'}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    for key in ("regime", "weak_tier", "budget", "split_id", "seed"):
        if key not in meta:
            raise FormatError(f"checkpoint meta lacks {key!r}")
    dataset = load_dataset(args.data)
    splits_path = args.splits_file or Path(args.data) / "splits.json"
    split = _pick_split(load_splits(splits_path), int(meta["split_id"]))
    ids = _subset_ids(dataset, split, args.subset)
    if not ids:
        raise DataError(f"no records in the {args.subset} subset")
    t0 = time.perf_counter()
    per_class, miou = evaluate_ids(model, dataset, ids)
    dt = time.perf_counter() - t0
    if miou is None:
        raise DataError("metric undefined: no foreground in subset or predictions")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = ReportRow(regime=meta["regime"], tier=meta["weak_tier"],
                    budget=int(meta["budget"]), split=int(meta["split_id"]),
                    per_class=[float(v) for v in per_class], miou=float(miou),
                    seed=int(meta["seed"]), runtime=dt)
    append_row_csv(row, out / "rows.csv")
    ious = " ".join(f"{v:.4f}" for v in per_class)
    print(f"{meta['regime']}/{meta['weak_tier']} budget {meta['budget']} "
          f"split {meta['split_id']} {args.subset}: miou {miou:.4f} (per class {ious})")
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.suite)
    failed = 0
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"[{mark}] {r.name}: {r.detail}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed "
          f"(backend: {get_backend()})")
    return 0 if failed == 0 else 1


def cmd_report(args) -> int:
    rows = []
    sources = sorted(Path(args.runs).rglob("rows.csv"))
    for path in sources:
        rows.extend(read_rows_csv(path))
    emit_report(rows, args.out)
    print(f"collected {len(rows)} rows from {len(sources)} files; "
          f"report under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluidseg",
        description="Layered-scene segmentation trainer with weak supervision.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and splits")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, help="override dataset.seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one regime on one split")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--weak-tier", choices=WEAK_TIERS)
    p.add_argument("--budget", type=int, required=True,
                   help="number of strongly annotated scans")
    p.add_argument("--split", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--splits-file", help="defaults to <data>/splits.json")
    p.add_argument("--progress", action="store_true",
                   help="print every epoch, not just validations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on val or test scans")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory receiving rows.csv")
    p.add_argument("--subset", choices=("val", "test"), default="test")
    p.add_argument("--splits-file", help="defaults to <data>/splits.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run built-in correctness suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="aggregate rows.csv files into a report")
    p.add_argument("--runs", required=True, help="directory scanned recursively")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
