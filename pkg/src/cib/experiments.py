"""Configuration-driven experiment runner: sweeps, ablations, reports.

A TOML config names the task, the objective settings, the seeds, and an
optional parameter sweep; one run is executed per (grid point, seed) pair.
Results are written twice from the same record dicts - JSON lines and a CSV
summary - so the two files cannot disagree; wall-clock timings go to a
separate file because results must be byte-identical across reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .metrics import evaluate_robustness
from .model import ToyModel, accuracy, train_model
from .objective import CIBConfig
from .task import EVAL_SPLITS, TaskConfig, generate_dataset

BETA_GRID = [1e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2]


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


class RunFailure(RuntimeError):
    """A run failed mid-experiment; partial results were flushed."""

    def __init__(self, message: str, partial: list):
        super().__init__(message)
        self.partial = partial


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    cib: CIBConfig = field(default_factory=CIBConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sweep_parameter: str | None = None
    sweep_grid: list[float] = field(default_factory=list)
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("experiment.seeds: must list at least one seed")
        if self.sweep_parameter is not None and self.sweep_parameter != "beta":
            raise ConfigError(
                f"experiment.sweep.parameter: only 'beta' is sweepable, got {self.sweep_parameter!r}")
        if self.sweep_parameter and not self.sweep_grid:
            raise ConfigError("experiment.sweep.grid: empty grid")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        def build(section: str, factory, defaults):
            data = doc.get(section, {})
            if not isinstance(data, dict):
                raise ConfigError(f"{section}: expected a table")
            known = {f.name for f in dataclasses.fields(factory)}
            for key in data:
                if key not in known:
                    raise ConfigError(f"{section}.{key}: unknown key")
            try:
                return factory(**{**defaults, **data})
            except ValueError as e:
                raise ConfigError(f"{section}: {e}") from None

        task = build("task", TaskConfig, {})
        cib = build("cib", CIBConfig, {})
        exp = doc.get("experiment", {})
        sweep = exp.get("sweep", {})
        if sweep and "grid" not in sweep:
            sweep = {**sweep, "grid": list(BETA_GRID)}
        return cls(
            task=task, cib=cib,
            seeds=[int(s) for s in exp.get("seeds", [0, 1, 2])],
            sweep_parameter=sweep.get("parameter"),
            sweep_grid=[float(b) for b in sweep.get("grid", [])],
            output_dir=str(exp.get("output_dir", "runs/experiment")),
        )

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            doc = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "cib": self.cib.to_dict(),
            "seeds": list(self.seeds),
            "sweep": {"parameter": self.sweep_parameter, "grid": list(self.sweep_grid)},
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        return _hash_dict(self.to_dict())

    def base_hash(self) -> str:
        """Hash with beta and seed scrubbed; identifies a sweep family."""
        doc = self.to_dict()
        doc["cib"] = {**doc["cib"], "beta": None, "seed": None}
        doc.pop("seeds")
        doc.pop("sweep")
        doc.pop("output_dir")
        return _hash_dict(doc)


def _hash_dict(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def single_run(task_cfg: TaskConfig, cib_cfg: CIBConfig, seed: int,
               base_hash: str, config_hash: str) -> dict:
    """Train one model and evaluate every split; returns a plain record dict."""
    t0 = time.perf_counter()
    run_cfg = dataclasses.replace(cib_cfg, seed=seed)
    ds = generate_dataset(task_cfg, seed=seed)
    model = ToyModel(task_cfg, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))))
    result = train_model(model, ds, run_cfg)
    split_acc = {name: accuracy(model, ds[name]) for name in EVAL_SPLITS}
    robustness = evaluate_robustness(model, ds, run_cfg)
    record = {
        "config_hash": config_hash,
        "base_hash": base_hash,
        "seed": seed,
        "beta": run_cfg.beta,
        "variant": run_cfg.variant.value,
        "upper_estimator": run_cfg.upper_estimator.value,
        "lower_estimator": run_cfg.lower_estimator.value,
        "split_accuracy": split_acc,
        "robustness": robustness.to_dict(),
        "final_train_loss": result.history[-1]["loss"],
        "final_vqa_loss": result.history[-1]["vqa"],
    }
    return {"record": record, "wall_clock_seconds": time.perf_counter() - t0}


def _run_spec(args):
    task_d, cib_d, seed, base_hash, config_hash = args
    return single_run(TaskConfig.from_dict(task_d), CIBConfig.from_dict(cib_d),
                      seed, base_hash, config_hash)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Execute every (grid point, seed) run and write results to disk.

    Runs are independent; with jobs > 1 they execute in separate processes.
    Records are written sorted by (beta, seed) so output bytes do not depend
    on completion order.  On a mid-run failure the completed records are
    flushed before the failure propagates.
    """
    betas = cfg.sweep_grid if cfg.sweep_parameter == "beta" else [cfg.cib.beta]
    base_hash = cfg.base_hash()
    config_hash = cfg.config_hash()
    specs = []
    for beta in betas:
        cib_d = {**cfg.cib.to_dict(), "beta": beta}
        for seed in cfg.seeds:
            specs.append((cfg.task.to_dict(), cib_d, seed, base_hash, config_hash))

    outputs: list[dict] = []
    failure: Exception | None = None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_spec, s) for s in specs]
            for fut in futures:
                try:
                    outputs.append(fut.result())
                except Exception as e:  # noqa: BLE001 - flushed below
                    failure = e
                    break
    else:
        for s in specs:
            try:
                outputs.append(_run_spec(s))
            except Exception as e:  # noqa: BLE001
                failure = e
                break

    outputs.sort(key=lambda o: (o["record"]["beta"], o["record"]["seed"]))
    records = [o["record"] for o in outputs]
    write_results(cfg.output_dir, records, [o["wall_clock_seconds"] for o in outputs])
    if failure is not None:
        raise RunFailure(f"run failed after {len(records)} completed records: {failure}",
                         records) from failure
    return records


RESULT_COLUMNS = ("config_hash", "seed", "beta", "variant", "upper_estimator",
                  "lower_estimator", "clean", "rephrase", "synonym",
                  "remove_irrelevant", "counterexample", "count_clean",
                  "remove_relevant", "cs_1", "cs_2", "cs_3", "cs_4",
                  "flips_iv", "flips_cv", "empirical_gap", "final_train_loss")


def _csv_row(record: dict) -> list:
    acc = record["split_accuracy"]
    rob = record["robustness"]
    cs = rob["cs"]
    return [record["config_hash"], record["seed"], record["beta"], record["variant"],
            record["upper_estimator"], record["lower_estimator"],
            acc["clean"], acc["rephrase"], acc["synonym"], acc["remove_irrelevant"],
            acc["counterexample"], acc["count_clean"], acc["remove_relevant"],
            cs.get("1"), cs.get("2"), cs.get("3"), cs.get("4"),
            rob["flips_iv"], rob["flips_cv"], rob["empirical_gap"],
            record["final_train_loss"]]


def write_results(out_dir, records: list[dict], timings: list[float]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for rec in records:
        writer.writerow(_csv_row(rec))
    (out / "summary.csv").write_text(buf.getvalue())
    # Timing is inherently non-deterministic, so it lives outside the
    # reproducible result files.
    with open(out / "timings.jsonl", "w") as fh:
        for rec, dt in zip(records, timings):
            fh.write(json.dumps({"seed": rec["seed"], "beta": rec["beta"],
                                 "wall_clock_seconds": dt}) + "\n")


def load_results(path) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "results.jsonl"
    return [json.loads(line) for line in p.read_text().splitlines() if line]


def sweep_summary(records: list[dict], metric: str = "counterexample") -> list[dict]:
    """Per-beta mean and standard deviation of one split accuracy.

    All records must come from the same sweep family (identical config apart
    from beta and seed).  The best row is flagged, ties broken toward the
    smaller beta.
    """
    if not records:
        raise ValueError("sweep_summary: no records")
    hashes = {r["base_hash"] for r in records}
    if len(hashes) > 1:
        raise ValueError(f"sweep_summary: heterogeneous configs {sorted(hashes)}")
    by_beta: dict[float, list[float]] = {}
    for r in records:
        by_beta.setdefault(r["beta"], []).append(r["split_accuracy"][metric])
    rows = []
    for beta in sorted(by_beta):
        vals = np.array(by_beta[beta])
        rows.append({"beta": beta, "mean": float(vals.mean()),
                     "std": float(vals.std()), "n": len(vals), "is_best": False})
    best = max(range(len(rows)), key=lambda i: (rows[i]["mean"], -rows[i]["beta"]))
    rows[best]["is_best"] = True
    return rows


def sweep_summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["beta", "mean", "std", "n", "is_best"])
    for row in rows:
        writer.writerow([row["beta"], row["mean"], row["std"], row["n"], row["is_best"]])
    return buf.getvalue()


def ablation_report(records: list[dict], metric: str = "counterexample") -> tuple[str, str]:
    """Markdown and CSV tables keyed by bound variant and by estimator pair.

    Cells show mean +/- std of the chosen split accuracy over seeds; variant
    cells or estimator pairs absent from the records are listed explicitly.
    """
    by_variant: dict[str, list[float]] = {}
    by_pair: dict[tuple[str, str], list[float]] = {}
    for r in records:
        val = r["split_accuracy"][metric]
        by_variant.setdefault(r["variant"], []).append(val)
        by_pair.setdefault((r["upper_estimator"], r["lower_estimator"]), []).append(val)

    all_variants = ["FULL", "SUM_ONLY", "REPR_ONLY", "SUM_PLUS_SKL"]
    missing_variants = [v for v in all_variants if v not in by_variant]

    lines = [f"# Ablation report ({metric} accuracy)", "", "## Bound variants", "",
             "| variant | mean | std | n |", "|---|---|---|---|"]
    for v in all_variants:
        if v in by_variant:
            vals = np.array(by_variant[v])
            lines.append(f"| {v} | {vals.mean():.4f} | {vals.std():.4f} | {len(vals)} |")
    if missing_variants:
        lines.append("")
        lines.append(f"Missing variant cells: {', '.join(missing_variants)}")

    lines += ["", "## Estimator pairs", "",
              "| upper | lower | mean | std | n |", "|---|---|---|---|---|"]
    for (u, low) in sorted(by_pair):
        vals = np.array(by_pair[(u, low)])
        lines.append(f"| {u} | {low} | {vals.mean():.4f} | {vals.std():.4f} | {len(vals)} |")
    markdown = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["table", "variant", "upper", "lower", "mean", "std", "n"])
    for v in all_variants:
        if v in by_variant:
            vals = np.array(by_variant[v])
            writer.writerow(["variant", v, "", "", float(vals.mean()),
                             float(vals.std()), len(vals)])
    for (u, low) in sorted(by_pair):
        vals = np.array(by_pair[(u, low)])
        writer.writerow(["estimators", "", u, low, float(vals.mean()),
                         float(vals.std()), len(vals)])
    return markdown, buf.getvalue()
