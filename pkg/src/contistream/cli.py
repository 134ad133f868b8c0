"""Command-line harness.

Verbs
-----
run       train one strategy over a list of seeds; writes run JSON and metrics CSV
grid      pick ``lam`` (md) or ``alpha`` (ld) by dev-split ACC on one seed
report    mean and population std of ACC and forgetting per (strategy, head, memory)
timing    head-only forward time versus task count
overhead  extra stored floats for a memory geometry, with and without gates

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or input.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, ContistreamError
from .metrics import MemoryGeometry, overhead, time_heads
from .models import HEAD_MODES, ContinualModel
from .scenario import build_scenario, generate_synthetic, load_idx
from .strategies import MEMORY_STRATEGIES, STRATEGIES, RunRecord, TrainConfig, train_strategy

logger = logging.getLogger("contistream")

DEFAULT_SEEDS = [0, 1, 2, 3, 4]
DEFAULT_GRIDS = {
    "md": [1.0, 0.5, 0.25, 0.1, 0.05, 0.025, 0.01],
    "ld": [0.1, 0.25, 0.5, 0.75, 1.0],
}
METRIC_COLUMNS = ["run_id", "strategy", "head_mode", "seed", "memory", "lambda", "alpha", "acc", "bwt",
                  "forgetting", "scaler_params", "O", "O_CG", "config"]

# section -> key -> (kind, default); kind drives validation
SCHEMA = {
    "": {
        "strategy": ("strategy", None),
        "seeds": ("int_list", DEFAULT_SEEDS),
        "out": ("str", "results"),
    },
    "scenario": {
        "source": (("synthetic", "idx"), "synthetic"),
        "task_count": ("int", 5),
        "class_count": ("int", 10),
        "per_class": ("int", 200),
        "feature_dim": ("int", 16),
        "spread": ("float", 0.25),
        "data_seed": ("int", 0),
        "dev_fraction": ("float", 0.1),
        "train_images": ("path", None),
        "train_labels": ("path", None),
        "test_images": ("path", None),
        "test_labels": ("path", None),
    },
    "train": {
        "epochs": ("int", 20),
        "batch_size": ("int", 32),
        "learning_rate": ("float", 0.01),
        "momentum": ("float", 0.8),
        "memory_capacity": ("int", 200),
        "lam": ("float", 0.1),
        "alpha": ("float", 0.1),
        "head_mode": (HEAD_MODES, "cascaded_gates"),
        "hidden": ("int_list", [64]),
        "embedding_dim": ("int", 64),
        "gamma": ("float", 1.0),
        "beta": ("float", 10.0),
        "diagnostics": ("bool", True),
    },
    "grid": {
        "values": ("float_list", None),
        "selection_seed": ("int", None),
    },
    "overhead": {
        "sample_shape": ("int_list", [32, 32, 3]),
        "memory": ("int", 500),
        "task_count": ("int", 5),
        "classes_per_task": ("int", 2),
        "embedding_dim": ("int", 64),
    },
    "timing": {
        "task_count": ("int", 20),
        "repeats": ("int", 100),
    },
}
REQUIRED = {("", "strategy")}


def _line(node) -> int:
    return node.start_mark.line + 1


def _scalar(loader, node):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError("expected a single value", _line(node))
    return loader.construct_object(node, deep=True)


def _coerce(loader, kind, node, key):
    where = _line(node)
    if kind in ("int_list", "float_list"):
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{key}: expected a list", where)
        caster = "int" if kind == "int_list" else "float"
        return [_coerce(loader, caster, item, key) for item in node.value]
    value = _scalar(loader, node)
    if isinstance(kind, tuple):
        if value not in kind:
            raise ConfigError(f"{key}: {value!r} is not one of {', '.join(kind)}", where)
        return value
    if kind == "strategy":
        if value not in STRATEGIES:
            raise ConfigError(f"{key}: unknown strategy {value!r}", where)
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", where)
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", where)
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}", where)
        return value
    if kind in ("str", "path"):
        if value is None and kind == "path":
            return None
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected text, got {value!r}", where)
        return value
    raise AssertionError(kind)


def _mapping(loader, node, section, values):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{section or 'document'}: expected a mapping", _line(node))
    seen = set()
    for key_node, value_node in node.value:
        key = _scalar(loader, key_node)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", _line(key_node))
        seen.add(key)
        if section == "" and key in SCHEMA and key != "":
            _mapping(loader, value_node, key, values)
            continue
        if key not in SCHEMA[section]:
            where = f"section {section!r}" if section else "top level"
            raise ConfigError(f"unknown key {key!r} at {where}", _line(key_node))
        kind, default = SCHEMA[section][key]
        if default is None and value_node.tag == "tag:yaml.org,2002:null":
            values[section][key] = None
            continue
        values[section][key] = _coerce(loader, kind, value_node, key)


def defaults() -> dict:
    return copy.deepcopy({section: {k: v[1] for k, v in keys.items()} for section, keys in SCHEMA.items()})


@dataclass
class ExperimentConfig:
    """Resolved experiment document; :meth:`to_dict` is echoed into every output."""

    strategy: str
    seeds: list
    out: str
    scenario: dict
    train: dict
    grid: dict = field(default_factory=dict)
    overhead: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def parse(cls, text: str, base_dir=".") -> "ExperimentConfig":
        try:
            loader = yaml.SafeLoader(text)
            try:
                node = loader.get_single_node()
            finally:
                loader.dispose()
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            raise ConfigError(f"malformed YAML: {exc.problem}", mark.line + 1 if mark else None) from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML: {exc}") from None
        if node is None:
            raise ConfigError("empty configuration", 1)
        values = defaults()
        _mapping(loader, node, "", values)
        for section, key in REQUIRED:
            if values[section][key] is None:
                raise ConfigError(f"missing required key {key!r}", _line(node))
        top = values.pop("")
        cfg = cls(top["strategy"], list(top["seeds"]), top["out"], base_dir=str(base_dir), **values)
        cfg.validate(node)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        return cls.parse(text, path.parent)

    def validate(self, node=None) -> None:
        where = _line(node) if node is not None else None
        if not self.seeds:
            raise ConfigError("seeds must not be empty", where)
        if self.strategy not in ("md",):
            # gates only exist for margin dampening; every other strategy uses plain heads
            self.train["head_mode"] = "incremental"
        if self.scenario["source"] == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not self.scenario[key]:
                    raise ConfigError(f"idx source needs scenario.{key}", where)
        try:
            for seed in self.seeds:
                self.train_config(seed)
        except ContistreamError as exc:
            raise ConfigError(str(exc), where) from None
        if self.strategy in MEMORY_STRATEGIES and self.train["memory_capacity"] < self.scenario["class_count"]:
            raise ConfigError("train.memory_capacity must hold one sample per class", where)

    def train_config(self, seed: int, **override) -> TrainConfig:
        return TrainConfig(**(self.train | {"hidden": tuple(self.train["hidden"]), "seed": seed} | override))

    def build_dataset(self):
        sc = self.scenario
        if sc["source"] == "synthetic":
            return generate_synthetic(sc["class_count"], sc["per_class"], sc["feature_dim"], sc["spread"],
                                      sc["data_seed"])
        base = Path(self.base_dir)
        train = load_idx(base / sc["train_images"], base / sc["train_labels"])
        return train.with_test(load_idx(base / sc["test_images"], base / sc["test_labels"]))

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seeds": list(self.seeds),
            "out": self.out,
            "scenario": dict(self.scenario),
            "train": dict(self.train),
            "grid": dict(self.grid),
            "overhead": dict(self.overhead),
            "timing": dict(self.timing),
        }


def parse_seeds(text: str) -> list:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds must not be empty")
    return seeds


def resolve(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seeds", None):
        cfg.seeds = parse_seeds(args.seeds)
    elif os.environ.get("CONTISTREAM_SEED"):
        cfg.seeds = parse_seeds(os.environ["CONTISTREAM_SEED"])
    if getattr(args, "out", None):
        cfg.out = args.out
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# run


def run_id(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.strategy}-{cfg.train['head_mode']}-m{cfg.train['memory_capacity']}-s{seed}"


def _run_cell(cfg_dict: dict, base_dir: str, seed: int) -> dict:
    cfg = ExperimentConfig(**cfg_dict, base_dir=base_dir)
    scenario = build_scenario(cfg.build_dataset(), cfg.scenario["task_count"], seed,
                              cfg.scenario["dev_fraction"])
    record = train_strategy(cfg.strategy, scenario, cfg.train_config(seed))
    data = record.to_dict()
    data["experiment"] = cfg_dict
    data["run_id"] = run_id(cfg, seed)
    data["sample_shape"] = list(scenario.dataset.sample_shape)
    return data


def metrics_row(cfg: ExperimentConfig, data: dict) -> dict:
    memory = cfg.train["memory_capacity"] if cfg.strategy in MEMORY_STRATEGIES else 0
    o = prod(data["sample_shape"]) * memory
    counts = data["parameter_counts"]
    return {
        "run_id": data["run_id"],
        "strategy": cfg.strategy,
        "head_mode": cfg.train["head_mode"],
        "seed": data["config"]["seed"],
        "memory": memory,
        "lambda": cfg.train["lam"],
        "alpha": cfg.train["alpha"],
        "acc": data["metrics"]["acc"],
        "bwt": data["metrics"]["bwt"],
        "forgetting": data["metrics"]["forgetting"],
        "scaler_params": counts["scaler_weights"] + counts["scaler_biases"],
        "O": o,
        "O_CG": o + counts["scaler_weights"],
        "config": json.dumps(cfg.to_dict(), sort_keys=True),
    }


def _write_csv(path: Path, columns: list, rows: list) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _map_cells(cfg: ExperimentConfig, seeds: list, parallel: int) -> list:
    payload = cfg.to_dict()
    if parallel > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_run_cell, payload, cfg.base_dir, s) for s in seeds]
            return [f.result() for f in futures]
    return [_run_cell(payload, cfg.base_dir, s) for s in seeds]


def cmd_run(args) -> int:
    cfg = resolve(args)
    results = _map_cells(cfg, cfg.seeds, args.parallel)
    out = Path(cfg.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    rows = []
    for data in results:
        (out / "runs" / f"{data['run_id']}.json").write_text(
            json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")
        rows.append(metrics_row(cfg, data))
        logger.info("%s acc=%.4f bwt=%.4f", data["run_id"], data["metrics"]["acc"], data["metrics"]["bwt"])
    _write_csv(out / f"metrics-{cfg.strategy}-{cfg.train['head_mode']}.csv", METRIC_COLUMNS, rows)
    for row in rows:
        print(f"{row['run_id']}\tacc={row['acc']:.4f}\tbwt={row['bwt']:.4f}")
    return 0


# --------------------------------------------------------------------------
# grid


def select_value(results: list) -> float:
    """Highest dev ACC wins; ties go to the larger value."""
    return max(results, key=lambda r: (r["dev_acc"], r["value"]))["value"]


def cmd_grid(args) -> int:
    cfg = resolve(args)
    if cfg.strategy not in DEFAULT_GRIDS:
        raise ConfigError(f"grid search needs strategy md or ld, not {cfg.strategy!r}")
    values = cfg.grid["values"] if cfg.grid["values"] is not None else DEFAULT_GRIDS[cfg.strategy]
    if not values:
        raise ConfigError("the grid is empty")
    key = "lam" if cfg.strategy == "md" else "alpha"
    seed = cfg.grid["selection_seed"] if cfg.grid["selection_seed"] is not None else cfg.seeds[0]
    dataset = cfg.build_dataset()
    scenario = build_scenario(dataset, cfg.scenario["task_count"], seed, cfg.scenario["dev_fraction"])
    results = []
    for value in values:
        record = train_strategy(cfg.strategy, scenario, cfg.train_config(seed, **{key: value, "diagnostics": False}))
        dev_acc = float(np.mean(record.dev_R[-1]))
        results.append({"value": value, "dev_acc": dev_acc, "test_acc": record.acc})
        logger.info("%s=%g dev_acc=%.4f", key, value, dev_acc)
    best = select_value(results)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = json.dumps(cfg.to_dict(), sort_keys=True)
    rows = [r | {"parameter": key, "selected": r["value"] == best, "config": echo} for r in results]
    _write_csv(out / f"grid-{cfg.strategy}.csv",
               ["parameter", "value", "dev_acc", "test_acc", "selected", "config"], rows)
    summary = {"parameter": key, "best": best, "selection_seed": seed, "grid": results,
               "experiment": cfg.to_dict()}
    (out / f"grid-{cfg.strategy}.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    print(f"best {key} = {best:g}")
    return 0


# --------------------------------------------------------------------------
# report

REPORT_COLUMNS = ["strategy", "head_mode", "memory", "runs", "acc_mean", "acc_std",
                  "forgetting_mean", "forgetting_std", "run_ids"]


def summarize(records: list) -> list:
    """Group run documents and average ACC and forgetting (population std)."""
    groups: dict = {}
    for data in records:
        exp = data.get("experiment", {})
        head = exp.get("train", {}).get("head_mode", data["config"]["head_mode"])
        memory = data["config"]["memory_capacity"] if data["strategy"] in MEMORY_STRATEGIES else 0
        groups.setdefault((data["strategy"], head, memory), []).append(data)
    rows = []
    for (strategy, head, memory), items in sorted(groups.items()):
        accs = np.array([RunRecord.from_dict(_record_fields(d)).acc for d in items])
        forg = np.array([RunRecord.from_dict(_record_fields(d)).forgetting for d in items])
        rows.append({
            "strategy": strategy, "head_mode": head, "memory": memory, "runs": len(items),
            "acc_mean": float(accs.mean()), "acc_std": float(accs.std()),
            "forgetting_mean": float(forg.mean()), "forgetting_std": float(forg.std()),
            "run_ids": " ".join(sorted(d.get("run_id", "") for d in items)),
        })
    return rows


def _record_fields(data: dict) -> dict:
    names = RunRecord.__dataclass_fields__
    return {k: v for k, v in data.items() if k in names}


def format_report(rows: list) -> str:
    header = ["strategy", "head_mode", "memory", "runs", "ACC", "forgetting"]
    body = [[r["strategy"], r["head_mode"], str(r["memory"]), str(r["runs"]),
             f"{100 * r['acc_mean']:.2f} ± {100 * r['acc_std']:.2f}",
             f"{100 * r['forgetting_mean']:.2f} ± {100 * r['forgetting_std']:.2f}"] for r in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    lines = ["# mean ± std over seeds in percent; std uses the population convention (divide by n)"]
    for line in [header, *body]:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    root = Path(args.results)
    paths = sorted(root.rglob("*.json")) if root.is_dir() else []
    records = []
    for path in paths:
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(data, dict) and "R" in data and "strategy" in data:
            records.append(data)
    if not records:
        raise ConfigError(f"no run records found under {root}")
    rows = summarize(records)
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "report.csv", REPORT_COLUMNS, rows)
    text = format_report(rows)
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# timing and overhead


def _emit(rows: list, columns: list, out_dir, name: str) -> None:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    sys.stdout.write(buffer.getvalue())
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / name).write_text(buffer.getvalue(), encoding="utf-8")


def cmd_timing(args) -> int:
    settings = defaults()["timing"]
    if args.config:
        settings = ExperimentConfig.load(args.config).timing
    tasks = args.tasks if args.tasks is not None else settings["task_count"]
    repeats = args.repeats if args.repeats is not None else settings["repeats"]
    if tasks < 1 or repeats < 10:
        raise ConfigError("timing needs at least 1 task and 10 repeats")
    rows = time_heads(task_count=tasks, repeats=repeats)
    _emit(rows, ["tasks", "gates", "incremental_ms", "cascaded_gates_ms"], args.out, "timing.csv")
    return 0


def overhead_rows(settings: dict) -> list:
    if settings["task_count"] < 1 or settings["classes_per_task"] < 2 or settings["memory"] < 0:
        raise ConfigError("overhead needs task_count >= 1, classes_per_task >= 2 and memory >= 0")
    dim = settings["embedding_dim"]
    model = ContinualModel([dim, dim], "cascaded_gates")
    for _ in range(settings["task_count"]):
        model.add_task(settings["classes_per_task"])
    report = overhead(MemoryGeometry(tuple(settings["sample_shape"]), settings["memory"]), model)
    return [{
        "sample_shape": "x".join(map(str, settings["sample_shape"])),
        "memory": settings["memory"],
        "tasks": settings["task_count"],
        "classes_per_task": settings["classes_per_task"],
        "embedding_dim": dim,
        "O": report.memory_floats,
        "scaler_weights": report.scaler_weight_floats,
        "scaler_biases": report.scaler_bias_floats,
        "formula_scaler_floats": report.formula_scaler_floats,
        "O_CG": report.o_cg,
        "O_CG_with_bias": report.o_cg_with_bias,
    }]


def cmd_overhead(args) -> int:
    settings = ExperimentConfig.load(args.config).overhead if args.config else defaults()["overhead"]
    rows = overhead_rows(settings)
    _emit(rows, list(rows[0]), args.out, "overhead.csv")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contistream", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train a strategy over seeds")
    grid = sub.add_parser("grid", help="select lambda/alpha on the dev split")
    for p in (run, grid):
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seeds", help="comma-separated seeds (overrides the config)")
    run.add_argument("--parallel", type=int, default=1, help="worker processes")
    grid.set_defaults(parallel=1)

    report = sub.add_parser("report", help="summarise run records")
    report.add_argument("results", help="directory holding run JSON files")
    report.add_argument("--out", help="where to write report.csv/report.txt (default: results)")

    timing = sub.add_parser("timing", help="time head forward passes")
    timing.add_argument("--tasks", type=int)
    timing.add_argument("--repeats", type=int)
    timing.add_argument("--config")
    timing.add_argument("--out")

    over = sub.add_parser("overhead", help="extra stored floats")
    over.add_argument("--config")
    over.add_argument("--out")
    return parser


COMMANDS = {"run": cmd_run, "grid": cmd_grid, "report": cmd_report, "timing": cmd_timing,
            "overhead": cmd_overhead}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure during execution maps to exit 1
        logger.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
