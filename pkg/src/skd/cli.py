"""``skd`` command line.

    skd gen-data --config C --seed S --out D
    skd train --setting selective-weak --data D --config C --seed S --out R [--teacher R0]
    skd eval --run R [--data D]
    skd compare R1 R2 ... [--out DIR]
    skd sweep --config C --fractions 0.1..1.0 --seeds 5 --out R

``--set key=value`` overrides any config key (dotted path, JSON value).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datamodel import DatasetError, dataset_fingerprint, save_dataset
from .harness import (
    ComparisonError,
    ConfigError,
    ExperimentConfig,
    compare_runs,
    evaluate_run,
    parse_fractions,
    read_metrics,
    run_setting,
    run_sweep,
)
from .model import DivergenceError
from .sampling import SelectionError
from .synthgen import generate_dataset
from .train import configure_determinism

SETTING_CHOICES = ("baseline", "kd", "kd-weak", "selective", "selective-weak")


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _load_config(args, **explicit) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = dict(args.set or [])
    overrides.update({k: v for k, v in explicit.items() if v is not None})
    return cfg.with_overrides(overrides) if overrides else cfg


def _domain_table(domains: dict) -> str:
    lines = []
    for d, m in domains.items():
        if m is None:
            lines.append(f"{d:>4}  n/a")
        else:
            lines.append(f"{d:>4}  {m['auc']:.4f} [{m['ci_low']:.4f}, {m['ci_high']:.4f}]"
                         f"  pos={m['n_pos']} neg={m['n_neg']}")
    return "\n".join(lines)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, seed=args.seed)
    ds = generate_dataset(cfg.synth, cfg.dataset_seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} stacks to {args.out}")
    print(f"dataset_hash {dataset_fingerprint(ds)}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args, setting=args.setting, seed=args.seed, data=args.data,
                       teacher=args.teacher)
    result = run_setting(cfg, args.out)
    print(f"{cfg.setting} seed={cfg.seed} -> {args.out}")
    print(_domain_table(result.to_dict()["domains"]))
    return 0


def cmd_eval(args) -> int:
    result = evaluate_run(args.run, args.data)
    domains = result.to_dict()["domains"]
    if args.data is None:
        stored = read_metrics(args.run)["domains"]
        if stored != domains:
            raise ComparisonError(f"{args.run}: metrics.json does not match scores_test.csv")
    print(_domain_table(domains))
    if args.json:
        Path(args.json).write_text(json.dumps(domains, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return 0


def cmd_compare(args) -> int:
    comp = compare_runs(args.runs, args.out)
    sys.stdout.write(comp.to_text())
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args, data=args.data)
    seeds = int(args.seeds) if args.seeds.isdigit() else [int(s) for s in args.seeds.split(",")]
    result = run_sweep(cfg, parse_fractions(args.fractions), seeds, args.out,
                       settings=[s.replace("-", "_") for s in args.settings.split(",")])
    failed = [c for c in result.cells if c.status != "ok"]
    for row in result.summary():
        print(f"{row['setting']:<15} {row['fraction']:.1f}  {row['mean_auc']:.4f} "
              f"[{row['min_auc']:.4f}, {row['max_auc']:.4f}]  n={row['n_seeds']}")
    if failed:
        print(f"{len(failed)} of {len(result.cells)} cells failed; see sweep.csv", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skd", description="Selective knowledge distillation lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and evaluate one setting")
    common(t)
    t.add_argument("--setting", choices=SETTING_CHOICES)
    t.add_argument("--data", help="dataset directory (default: generate from config)")
    t.add_argument("--teacher", help="baseline run directory to reuse as teacher")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", help="dataset to score (default: the run's persisted scores)")
    e.add_argument("--json", help="write the metrics to this file")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="comparison table over runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", help="directory for comparison.txt/.csv/.svg")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="annotation-fraction sweep")
    common(s, seed=False)
    s.add_argument("--data")
    s.add_argument("--fractions", default="0.1..1.0")
    s.add_argument("--seeds", default="5", help="count, or comma-separated seeds")
    s.add_argument("--settings", default="baseline,selective,selective-weak")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_determinism()
    try:
        return args.func(args)
    except (ConfigError, ComparisonError, DatasetError, SelectionError, DivergenceError,
            FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"skd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
