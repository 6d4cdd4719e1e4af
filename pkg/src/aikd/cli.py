"""Command-line entry points: run, ablate, resume, report."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import (ConfigValidationError, ExperimentConfig, apply_overrides, config_hash, load_config,
                     parse_override, validate)
from .evaluation import MetricsReport

DATA_ROOT_ENV = "AIKD_DATA_ROOT"

FLAG_KEYS = {
    "aikd": "components.aikd",
    "uct": "components.uct",
    "cutmix": "cutmix.enabled",
    "finetune": "components.finetune",
    "feature_distill": "components.feature_distill",
}

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_REFUSED = 0, 2, 1, 3


def _data_root():
    return os.environ.get(DATA_ROOT_ENV)


def _report_errors(errors):
    print(json.dumps({"errors": list(errors)}, indent=1), file=sys.stderr)


def _summary(report: MetricsReport) -> str:
    return (f"Avg {report.mean_avg:.2f} +/- {report.std_avg:.2f}  "
            f"Last {report.mean_last:.2f} +/- {report.std_last:.2f}  ({len(report.seeds)} seeds)")


def cmd_run(args) -> int:
    from .trainer import run_experiment

    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg.output_dir)
    report = run_experiment(cfg, out, data_root=_data_root())
    print(f"{cfg.name}: {_summary(report)} -> {out / 'metrics.json'}")
    return EXIT_OK


def _raw(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def expand_grid(flags: list[str], grid: list[str]) -> list[tuple[str, list[str]]]:
    """Sub-run names and their overrides for the cartesian product of the grid axes."""
    axes: list[tuple[str, list]] = []
    for name in flags:
        if name not in FLAG_KEYS:
            raise ConfigValidationError([f"unknown component flag {name!r}; known: {sorted(FLAG_KEYS)}"])
        axes.append((FLAG_KEYS[name], [False, True]))
    for item in grid:
        path, values = parse_override(item)
        key = ".".join(path)
        if isinstance(values, str) and "," in values:
            values = [yaml.safe_load(v) for v in values.split(",")]
        values = values if isinstance(values, list) else [values]
        if not values:
            raise ConfigValidationError([f"grid axis {key} has no values"])
        axes.append((key, values))
    if not axes:
        raise ConfigValidationError(["ablation grid is empty"])
    points = []
    for combo in itertools.product(*(v for _, v in axes)):
        overrides = [f"{k}={json.dumps(v)}" for (k, _), v in zip(axes, combo)]
        name = "__".join(f"{k.split('.')[-1]}={json.dumps(v)}" for (k, _), v in zip(axes, combo))
        points.append((name, overrides))
    return points


def cmd_ablate(args) -> int:
    from .protocol import load_dataset
    from .trainer import run_experiment

    base = apply_overrides(_raw(args.config), args.set)
    flags = [f for f in (args.flags or "").split(",") if f]
    points = expand_grid(flags, args.grid)
    # validate every grid point before any training starts
    configs = []
    errors = []
    for name, overrides in points:
        try:
            configs.append((name, validate(apply_overrides(base, overrides))))
        except ConfigValidationError as err:
            errors += [f"{name}: {e}" for e in err.errors]
    if errors:
        raise ConfigValidationError(errors)
    out = Path(args.out or configs[0][1].output_dir)
    cache: dict[str, tuple] = {}
    rows = []
    for name, cfg in configs:
        key = json.dumps(cfg.dataset.model_dump(), sort_keys=True)
        if key not in cache:
            cache[key] = load_dataset(cfg.dataset.model_dump(), _data_root())
        report = run_experiment(cfg, out / name, data=cache[key])
        rows.append({"name": name, "mean_avg": report.mean_avg, "std_avg": report.std_avg,
                     "mean_last": report.mean_last, "std_last": report.std_last,
                     "per_seed_avg": [s.avg for s in report.seeds]})
        print(f"{name}: {_summary(report)}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "mean_avg", "std_avg", "mean_last", "std_last"])
        for r in rows:
            w.writerow([r["name"], f"{r['mean_avg']:.4f}", f"{r['std_avg']:.4f}",
                        f"{r['mean_last']:.4f}", f"{r['std_last']:.4f}"])
    return EXIT_OK


def _load_run_config(run_dir: Path) -> tuple[ExperimentConfig, dict]:
    manifest_path, cfg_path = run_dir / "manifest.json", run_dir / "config.yaml"
    if not manifest_path.is_file() or not cfg_path.is_file():
        raise FileNotFoundError(f"{run_dir} is not a run directory (manifest.json/config.yaml missing)")
    manifest = json.loads(manifest_path.read_text())
    cfg = load_config(cfg_path)
    if config_hash(cfg) != manifest["config_hash"]:
        raise ValueError(f"config.yaml in {run_dir} does not match its manifest hash")
    return cfg, manifest


def cmd_resume(args) -> int:
    from .protocol import make_class_splits
    from .trainer import protocol_of, resume_experiment

    run_dir = Path(args.run_dir)
    cfg, manifest = _load_run_config(run_dir)
    if args.config:
        supplied = load_config(args.config, args.set)
        if config_hash(supplied) != manifest["config_hash"]:
            print(f"refusing to resume: config hash {config_hash(supplied)} differs from "
                  f"manifest {manifest['config_hash']}", file=sys.stderr)
            return EXIT_REFUSED
    n_rounds = len(make_class_splits(protocol_of(cfg, cfg.trainer.seeds[0])))
    if args.round >= n_rounds - 1:
        print(f"round {args.round} is the last round (or beyond); nothing to resume")
        return EXIT_OK
    report = resume_experiment(cfg, run_dir, args.round, data_root=_data_root())
    print(f"{cfg.name}: {_summary(report)} -> {run_dir / 'metrics.json'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .trainer import collect_report

    run_dir = Path(args.run_dir)
    cfg, _ = _load_run_config(run_dir)
    report = collect_report(cfg, run_dir)
    print(_summary(report))
    for s in report.seeds:
        curve = " ".join(f"{r.classes_seen}:{r.top1:.1f}" for r in s.rounds)
        print(f"  seed {s.seed}: avg {s.avg:.2f} last {s.last:.2f} | {curve}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="aikd",
        description="Class-incremental learning experiments. "
                    f"Relative dataset paths resolve against ${DATA_ROOT_ENV}.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add_set(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, value parsed as YAML (repeatable)")

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True, help="YAML experiment config")
    r.add_argument("--out", help="output directory (default: output_dir from the config)")
    add_set(r)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run one sub-experiment per grid point")
    a.add_argument("--config", required=True, help="base YAML experiment config")
    a.add_argument("--flags", help=f"comma-separated component flags to toggle: {','.join(FLAG_KEYS)}")
    a.add_argument("--grid", action="append", default=[], metavar="KEY=[V1,V2,...]",
                   help="value axis, e.g. weights.lambda_a=[0,0.25,0.5,1,2] (repeatable)")
    a.add_argument("--out", help="parent output directory for the sub-runs")
    add_set(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("resume", help="continue a run from a saved round")
    s.add_argument("run_dir", help="run directory written by `run`")
    s.add_argument("--round", type=int, required=True, help="last completed round to restart from")
    s.add_argument("--config", help="optional config; refused if its hash differs from the manifest")
    add_set(s)
    s.set_defaults(func=cmd_resume)

    rep = sub.add_parser("report", help="re-render metrics files from a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigValidationError as err:
        _report_errors(err.errors)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError, FloatingPointError) as err:
        _report_errors([str(err)])
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
