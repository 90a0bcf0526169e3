"""Command-line entry point: ``dualkan <subcommand> [flags]``.

Exit status is 0 on success, 2 for bad flags or configuration and 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_setting, load_config, to_dict
from .data import DataConfigError, DatasetSpec, dataset_hash, gen_synthetic_dataset, write_dataset
from .evaluation import ProbeDataError
from .fitting import FUNCTIONS, fit_function
from .gradcheck import TERMS, run_gradcheck
from .pipeline import (PLACEMENT_VARIANTS, REPORT_SCHEMA, compare_heads, deterministic_mode,
                       format_table, run_eval, run_probe, run_training, write_report)
from .trainer import DivergenceError

__all__ = ["main", "build_parser", "UsageError"]

log = logging.getLogger("dualkan")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualkan", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI-style run configuration (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", default=".", help="output directory for reports and artifacts")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry, e.g. train.epochs=3 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic texture set as PNGs plus TSV manifests")
    g.add_argument("--name", default="textures", help="dataset name prefix")

    t = sub.add_parser("train", help="self-supervised training with a checkpoint per epoch")
    t.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")

    pr = sub.add_parser("probe", help="fit a linear probe on a frozen checkpointed encoder")
    pr.add_argument("--checkpoint", required=True)

    e = sub.add_parser("eval", help="recompute metrics from a stored probe")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--probe", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    gc.add_argument("--configs", type=int, default=20, help="random configurations per term")
    gc.add_argument("--h", type=float, default=1e-4, help="central-difference step")
    gc.add_argument("--terms", nargs="+", choices=sorted(TERMS), help="subset of terms")

    f = sub.add_parser("fitfn", help="fit a small KAN to an analytic function")
    f.add_argument("--fn", required=True, choices=sorted(FUNCTIONS))
    f.add_argument("--grid", type=int, default=5)
    f.add_argument("--order", type=int, default=3)
    f.add_argument("--iters", type=int, default=400, help="L-BFGS iterations")

    c = sub.add_parser("compare-heads", help="matched trainings that differ only in head placement")
    c.add_argument("--variants", nargs="+", default=["base", "all"], choices=sorted(PLACEMENT_VARIANTS))
    c.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        apply_setting(cfg, key.strip(), value.strip())
    if getattr(args, "epochs", None) is not None:
        apply_setting(cfg, "train.epochs", str(args.epochs))
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg.seed = args.seed
    return cfg.validate()


def _emit(report: dict, path: str) -> None:
    write_report(report, path)
    print(f"report: {path}")


def _cmd_gen_data(args, cfg: RunConfig) -> int:
    d = cfg.data
    out = {}
    for split, (name, per_class) in enumerate(((f"{args.name}_train", d.train_per_class),
                                               (f"{args.name}_test", d.test_per_class))):
        spec = DatasetSpec.default(d.classes, per_class=per_class, size=d.size, jitter=d.jitter)
        ds = gen_synthetic_dataset(spec, cfg.seed, split=split)
        manifest = write_dataset(ds, args.out, name)
        out[name] = {"manifest": os.path.basename(manifest), "images": len(ds),
                     "sha256": dataset_hash(ds)}
        print(f"{name}: {len(ds)} images -> {manifest}")
    _emit({"schema": REPORT_SCHEMA, "command": "gen-data", "config": to_dict(cfg), "datasets": out},
          os.path.join(args.out, "gen_data.json"))
    return 0


def _cmd_train(args, cfg: RunConfig) -> int:
    report = run_training(cfg, args.out)
    for row in report["trace"]:
        print(f"epoch {row['epoch']:3d}  total {row['total']:.6f}  relation {row['relation']:.6f}"
              f"  style {row['style']:.6f}  kan_reg {row['kan_reg']:.6f}")
    _emit(report, os.path.join(args.out, cfg.io.report))
    return 0


def _cmd_probe(args, cfg: Optional[RunConfig]) -> int:
    report = run_probe(args.checkpoint, args.out, cfg)
    m = report["metrics"]
    print(f"top1 {m['top1']:.4f}  top5 {m['top5']:.4f}  f1 {m['f1']:.4f}")
    _emit(report, os.path.join(args.out, "probe.json"))
    return 0


def _cmd_eval(args, cfg: Optional[RunConfig]) -> int:
    report = run_eval(args.checkpoint, args.probe, cfg)
    m = report["metrics"]
    print(f"top1 {m['top1']:.4f}  top5 {m['top5']:.4f}  f1 {m['f1']:.4f}")
    _emit(report, os.path.join(args.out, "eval.json"))
    return 0


def _cmd_gradcheck(args, cfg: RunConfig) -> int:
    terms = {t: args.configs for t in args.terms} if args.terms else None
    results = run_gradcheck(args.configs, seed=cfg.seed, h=args.h, terms=terms)
    for name, r in results.items():
        flag = "ok" if r["max_rel_error"] < GRADCHECK_TOL else "FAIL"
        print(f"{name:<16} max_rel_error {r['max_rel_error']:.3e}  configs {r['configs']:3d}  {flag}")
    passed = all(r["max_rel_error"] < GRADCHECK_TOL for r in results.values())
    _emit({"schema": REPORT_SCHEMA, "command": "gradcheck", "seed": cfg.seed, "h": args.h,
           "tolerance": GRADCHECK_TOL, "passed": passed, "terms": results},
          os.path.join(args.out, "gradcheck.json"))
    return 0 if passed else 1


def _cmd_fitfn(args, cfg: RunConfig) -> int:
    r = fit_function(args.fn, seed=cfg.seed, intervals=args.grid, order=args.order, max_iter=args.iters)
    r.pop("head")
    print(f"{args.fn}: RMSE {r['rmse']:.3e} (train {r['train_rmse']:.3e})")
    _emit({"schema": REPORT_SCHEMA, "command": "fitfn", "seed": cfg.seed, **r},
          os.path.join(args.out, f"fitfn_{args.fn}.json"))
    return 0


def _cmd_compare(args, cfg: RunConfig) -> int:
    report = compare_heads(cfg, args.variants, args.out)
    print(format_table(report["rows"]))
    _emit(report, os.path.join(args.out, "compare_heads.json"))
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "probe": _cmd_probe,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "fitfn": _cmd_fitfn,
    "compare-heads": _cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    deterministic_mode()
    try:
        cfg = _resolve_config(args)
        # probe/eval fall back to the snapshot inside the checkpoint unless a config is given
        explicit = args.config or args.set or args.seed is not None
        if args.command in ("probe", "eval") and not explicit:
            cfg = None
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, DataConfigError, KeyError) as e:
        print(f"dualkan: error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, DivergenceError, ProbeDataError, OSError, RuntimeError, ValueError) as e:
        print(f"dualkan: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
