"""``pvm`` command-line entry point.

Exit codes: 0 success, 1 a verification suite or run failed, 2 usage errors
(unknown suite, missing checkpoint, bad config, infeasible mask policy).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import report
from .config import ExperimentConfig, load_config
from .datagen import BrushGrid, Regime, SparseSample, gen_mask
from .errors import CheckpointError, ConfigError, InfeasiblePolicyError, PVMError
from .io import save_pgm, save_pvmt
from .verify import SUITES, run_suite


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite in (None, "all") else [args.suite]
    if args.suite not in (None, "all") and args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; available: {', '.join(SUITES)}, all", file=sys.stderr)
        return 2
    failed = []
    for name in names:
        res = run_suite(name, seed=args.seed or 0)
        for line in res.lines:
            print(line)
        print(f"{'PASS' if res.passed else 'FAIL'} {name} ({res.seconds:.1f} s)")
        if not res.passed:
            failed.append(name)
    return 1 if failed else 0


def _train_report(cfg: ExperimentConfig, results: dict[str, list[ex.RunResult]], out: Path) -> str:
    metrics = list(next(iter(results.values()))[0].final)
    header = ["variant", "seed"] + metrics
    rows = [[v, r.seed] + [r.final[m] for m in metrics] for v, runs in results.items() for r in runs]
    for v, runs in results.items():
        rows.append([v, "mean"] + [float(np.mean([r.final[m] for r in runs])) for m in metrics])
    report.write_tsv(out / "results.tsv", header, rows)
    report.training_curves(
        {v: [rec for r in runs for rec in r.metrics.records] for v, runs in results.items()},
        out / "training_curves.png",
    )
    seeds = [str(s) for s in cfg.seeds]
    main = metrics[0]
    report.grouped_bars(
        seeds, {v: [r.final[main] for r in runs] for v, runs in results.items()},
        f"test {main}", out / f"test_{main}.png", title=f"{cfg.task}: {main} per seed",
    )
    return report.render_tsv(header, rows)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    results = ex.train_sweep(cfg, out)
    print(_train_report(cfg, results, out))
    return 0


def _checkpoints(cfg: ExperimentConfig, args) -> list[Path]:
    if args.checkpoint:
        return [Path(args.checkpoint)]
    out = Path(cfg.out_dir)
    found = []
    for variant in cfg.variant:
        for seed in cfg.seeds:
            found.append(out / ex.run_name(cfg, variant) / f"seed-{seed}")
    return found


def cmd_eval(args) -> int:
    cfg = _config(args)
    regimes = ex.REGIMES if args.regime in (None, "all") else (args.regime,)
    out = Path(cfg.out_dir)
    rows, by_variant = [], {}
    for path in _checkpoints(cfg, args):
        mlog, meta = ex.eval_checkpoint(path, cfg, regimes)
        variant = meta["variant"]
        ex.write_records(out / f"{ex.run_name(cfg, variant)}.metrics.jsonl", mlog.records, append=True)
        for r in mlog.records:
            rows.append([variant, r["seed"], r["split"].removeprefix("test-"), r["metric"], r["value"]])
            by_variant.setdefault(variant, {}).setdefault((r["split"], r["metric"]), []).append(r["value"])
    header = ["variant", "seed", "regime", "metric", "value"]
    for variant, groups in by_variant.items():
        for (split, metric), vals in groups.items():
            rows.append([variant, "mean", split.removeprefix("test-"), metric, float(np.mean(vals))])
    report.write_tsv(out / "regimes.tsv", header, rows)
    main = "top1" if cfg.task == "cls" else "rmse"
    series = {
        v: [float(np.mean(g[(f"test-{reg}", main)])) for reg in regimes] for v, g in by_variant.items()
    }
    report.grouped_bars(list(regimes), series, main, out / "regimes.png", title=f"{cfg.task}: {main} by mask regime")
    print(report.render_tsv(header, rows))
    return 0


def cmd_maskgen(args) -> int:
    h = args.height or args.size
    w = args.width or args.size
    if args.regime:
        policy = Regime(args.regime)
    elif args.policy == "sparse":
        policy = SparseSample(args.density)
    else:
        policy = BrushGrid(patch=args.patch)
    mask = gen_mask(policy, h, w, seed=args.seed or 0, index=args.index)
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_pvmt(stem.with_suffix(".pvmt"), mask.astype(np.uint8))
    save_pgm(stem.with_suffix(".pgm"), mask)
    print(f"invalid fraction: {1.0 - mask.mean():.6f}")
    return 0


def cmd_ablate_padding(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    rows, _ = ex.ablate_padding(cfg, out)
    header = ["strategy", "label", "rmse", "mae", "reference_rmse_m", "note"]
    table = [
        [r.strategy, ex.PADDING_LABELS[r.strategy], r.rmse, r.mae,
         ex.REFERENCE_TOKEN_PADDING_RMSE[r.strategy], "desk scale; not comparable to reference"]
        for r in rows
    ]
    report.write_tsv(out / "ablate-padding.tsv", header, table)
    report.grouped_bars(
        [r.strategy for r in rows], {"rmse": [r.rmse for r in rows]}, "RMSE", out / "ablate-padding.png",
        errors={"rmse": [float(np.std(r.rmse_per_seed)) for r in rows]}, title="token padding strategy",
    )
    print(report.render_tsv(header, table))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvm", description="Partial Vision Mamba experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", help=f"one of {', '.join(SUITES)} or all (default)")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    for name, func, helptext in (
        ("train", cmd_train, "train every configured variant and seed"),
        ("ablate-padding", cmd_ablate_padding, "token padding comparison on the depth task"),
    ):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", required=True)
        t.add_argument("--seed", type=int, help="run this seed only")
        t.add_argument("--out", help="output directory (overrides the config)")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate checkpoints under full-image mask regimes")
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="run directory holding the checkpoints")
    e.add_argument("--checkpoint", help="a single checkpoint directory")
    e.add_argument("--regime", choices=(*ex.REGIMES, "all"), default="all")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("maskgen", help="write one validity mask as PVMT and P5 files")
    m.add_argument("--regime", choices=ex.REGIMES)
    m.add_argument("--policy", choices=("brush_grid", "sparse"), default="brush_grid")
    m.add_argument("--density", type=float, default=0.05)
    m.add_argument("--patch", type=int, default=4)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--height", type=int)
    m.add_argument("--width", type=int)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--index", type=int, default=0)
    m.add_argument("--out", default="mask")
    m.set_defaults(func=cmd_maskgen)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CheckpointError, ConfigError, InfeasiblePolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PVMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
