"""Command-line entry point.

Subcommands: gen-data, train, estimate, verify-bounds, eval-robustness,
sweep, report.  Exit codes: 0 success, 1 usage or config error, 2 runtime
failure, 3 bound violation found by verify-bounds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import estimators as E
from . import task as K
from . import tensor as T
from .experiments import (
    ConfigError,
    ExperimentConfig,
    RunFailure,
    ablation_report,
    load_results,
    run_experiment,
    sweep_summary,
    sweep_summary_csv,
)
from .metrics import evaluate_robustness
from .model import ToyModel, train_model
from .objective import verify_bound_ordering

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_BOUND_VIOLATION = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_experiment_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_toml(path)


def _cmd_gen_data(args) -> int:
    cfg = _load_experiment_config(args.config)
    ds = K.generate_dataset(cfg.task, seed=args.seed)
    K.save_dataset(ds, args.out)
    sizes = {name: len(ex) for name, ex in sorted(ds.splits.items())}
    print(json.dumps({"out": str(args.out), "seed": args.seed, "splits": sizes}))
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_experiment_config(args.config)
    run_cfg = dataclasses.replace(cfg.cib, seed=args.seed)
    if args.data:
        ds = K.load_dataset(args.data)
    else:
        ds = K.generate_dataset(cfg.task, seed=args.seed)
    model = ToyModel(ds.config, np.random.default_rng(
        np.random.SeedSequence(args.seed, spawn_key=(7,))))
    result = train_model(model, ds, run_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(model.params, out / "checkpoint.json")
    with open(out / "history.jsonl", "w") as fh:
        for row in result.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    report = evaluate_robustness(model, ds, run_cfg)
    (out / "robustness.json").write_text(json.dumps(report.to_dict(), sort_keys=True))
    print(json.dumps({"out": str(out), "seed": args.seed,
                      "final_loss": result.history[-1]["loss"],
                      "acc_clean": report.acc_clean,
                      "acc_counterexample": report.acc_perturbed}))
    return EXIT_OK


def _cmd_estimate(args) -> int:
    estimator = E.Estimator(args.estimator.upper())
    oracle = E.gaussian_mi_oracle(args.rho, args.dim).value
    est = E.evaluate_estimator(estimator, args.rho, args.dim, args.n_samples,
                               seed=args.seed, train_steps=args.train_steps)
    print(json.dumps({"estimator": estimator.value, "value": est.value,
                      "oracle": oracle, "n": args.n_samples, "seed": args.seed}))
    return EXIT_OK


def _cmd_verify_bounds(args) -> int:
    dims = tuple(int(x) for x in args.dims.split(","))
    if len(dims) != 4:
        raise ConfigError(f"--dims needs four comma-separated integers, got {args.dims!r}")
    reports = [verify_bound_ordering(seed, dims=dims, noise=args.noise)
               for seed in range(args.seeds)]
    payload = json.dumps([r.to_dict() for r in reports], indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    else:
        print(payload)
    violations = [r.seed for r in reports if not r.all_hold]
    if violations:
        print(f"bound violations at seeds: {violations}", file=sys.stderr)
        return EXIT_BOUND_VIOLATION
    return EXIT_OK


def _cmd_eval_robustness(args) -> int:
    ds = K.load_dataset(args.data)
    model = ToyModel(ds.config, np.random.default_rng(0))
    T.load_into(model.params, T.load_checkpoint(args.model))
    report = evaluate_robustness(model, ds)
    payload = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    else:
        print(payload)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load_experiment_config(args.config)
    if args.out:
        cfg.output_dir = args.out
    if cfg.sweep_parameter is None:
        cfg.sweep_parameter = "beta"
        if not cfg.sweep_grid:
            from .experiments import BETA_GRID
            cfg.sweep_grid = list(BETA_GRID)
    records = run_experiment(cfg, jobs=args.jobs)
    print(json.dumps({"out": cfg.output_dir, "records": len(records)}))
    return EXIT_OK


def _cmd_report(args) -> int:
    records = load_results(args.results)
    out = Path(args.out or args.results)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rows = sweep_summary(records, metric=args.metric)
        (out / "sweep_summary.csv").write_text(sweep_summary_csv(rows))
    except ValueError:
        rows = None
    markdown, csv_text = ablation_report(records, metric=args.metric)
    (out / "ablation.md").write_text(markdown)
    (out / "ablation.csv").write_text(csv_text)
    print(json.dumps({"out": str(out), "records": len(records),
                      "sweep_rows": len(rows) if rows else 0}))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="cib", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=str, default=None)
    common.add_argument("--config", type=str, default=None)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate and serialize a synthetic dataset")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", type=str, default=None,
                   help="dataset directory (generated from config when omitted)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("estimate", parents=[common],
                       help="evaluate one MI estimator against the Gaussian oracle")
    p.add_argument("--estimator", required=True,
                   choices=[e.value for e in (*E.UPPER_ESTIMATORS, *E.LOWER_ESTIMATORS)])
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--train-steps", type=int, default=1200)
    p.set_defaults(fn=_cmd_estimate)

    p = sub.add_parser("verify-bounds", parents=[common],
                       help="check the bound inequalities on random Gaussian systems")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--dims", type=str, default="3,3,2,2")
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(fn=_cmd_verify_bounds)

    p = sub.add_parser("eval-robustness", parents=[common],
                       help="evaluate a checkpoint on a serialized dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_eval_robustness)

    p = sub.add_parser("sweep", parents=[common], help="run the beta sweep")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("report", parents=[common],
                       help="summarize results into sweep and ablation tables")
    p.add_argument("--results", required=True)
    p.add_argument("--metric", type=str, default="counterexample")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
