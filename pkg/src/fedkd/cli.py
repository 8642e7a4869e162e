"""Command-line front end: JSON experiment configs, run directories keyed by
config digest + seed, ablation sweeps over one declared parameter, and a
plain-text comparison report.

Config layout (JSON; unknown keys anywhere are rejected):

    {
      "seed": 0,
      "num_nodes": 5,
      "alpha": 1.0,
      "task": {"kind": "synthetic", "num_classes": 4, "dim": 16, ...}
              or {"kind": "csv", "private": ..., "public": ..., "test": ...},
      "node": {"hidden_dims": [64], "epochs": 30, ...},
      "ensemble": {"quant_scale": 200, "gamma": 1.0, "weight_mode": "per_class"},
      "distill": {"steps": 2000, "batch_size": 64, ..., "tau": "inf"},
      "central_hidden_dims": [64],
      "repeats": 1, "query_noise": 0.0, "labeled_public": false,
      "rounds": 30,
      "sweep": {"param": "gamma", "values": [null, 1.0], "seeds": [0, 1]}
    }

"off" and null both disable quantization or noise; tau accepts a number or
"inf". Exit codes: 0 success, 2 bad config or invocation, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import (
    CsvSchema,
    Dataset,
    GaussianTaskSpec,
    MULTI_LABEL,
    SINGLE_LABEL,
    dirichlet_partition,
    gen_gaussian_task,
    load_csv,
)
from .distill import DistillConfig, LOGIT_L2
from .ensemble import EnsembleConfig, PER_CLASS, UNIFORM
from .errors import ConfigurationError, FedKdError
from .numkit import RandomStream
from .protocol import (
    FedKdRun,
    TrainConfig,
    ledger_report,
    run_fedavg,
    run_fedkd,
)

# stream tags for data generation; disjoint from the protocol module's tags
STREAM_TASK_MEANS = 10
STREAM_PRIVATE = 11
STREAM_TEST = 12
STREAM_PUBLIC = 13
STREAM_PARTITION = 14

SWEEP_AXES = ("gamma", "S", "d0", "alpha", "K", "R")

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "config_to_dict",
    "config_digest",
    "build_data",
    "cmd_run",
    "cmd_fedavg",
    "cmd_ablate",
    "cmd_report",
    "main",
]


@dataclass
class SyntheticTask:
    num_classes: int = 4
    dim: int = 16
    train_per_class: int = 250
    test_per_class: int = 250
    public_per_class: int = 250
    cov_scale: float = 1.0
    class_sep: float = 4.0
    domain_shift: float = 1.0


@dataclass
class CsvTask:
    private: str
    public: str
    test: str
    task_type: str
    num_classes: int
    feature_cols: list[str]
    label_cols: list[str]


@dataclass
class NodeSection:
    hidden_dims: list[int] = field(default_factory=lambda: [64])
    epochs: int = 30
    batch_size: int = 32
    lr_start: float = 0.05
    lr_end: float = 0.0
    weight_decay: float = 0.0


@dataclass
class EnsembleSection:
    quant_scale: int | None = 200
    gamma: float | None = 1.0
    weight_mode: str = PER_CLASS


@dataclass
class DistillSection:
    steps: int = 2000
    batch_size: int = 64
    lr_start: float = 0.05
    lr_end: float = 0.0
    weight_decay: float = 0.0
    tau: float = math.inf
    loss_mode: str = LOGIT_L2


@dataclass
class SweepSection:
    param: str
    values: list
    seeds: list[int]


@dataclass
class ExperimentConfig:
    task: SyntheticTask | CsvTask
    num_nodes: int = 5
    alpha: float = 1.0
    seed: int = 0
    node: NodeSection = field(default_factory=NodeSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    distill: DistillSection = field(default_factory=DistillSection)
    central_hidden_dims: list[int] = field(default_factory=lambda: [64])
    repeats: int = 1
    query_noise: float = 0.0
    labeled_public: bool = False
    rounds: int = 30
    sweep: SweepSection | None = None


def _reject_unknown(section: dict, allowed, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigurationError(f"unknown key {key!r} in {where}")


def _off_or(value, kind, where):
    """null / "off" disable a knob; otherwise coerce to the given type."""
    if value is None or value == "off":
        return None
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{where} must be a number or \"off\"") from None


def _parse_tau(value):
    if value is None or value == "inf":
        return math.inf
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError('distill.tau must be a number or "inf"') from None


def _section(doc, key, cls, extra=None):
    raw = doc.get(key, {})
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{key!r} must be an object")
    fields = {f for f in cls.__dataclass_fields__}
    _reject_unknown(raw, fields, key)
    merged = dict(raw)
    if extra:
        merged.update(extra)
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigurationError(f"bad {key} section: {exc}") from None


def parse_dict(doc: dict) -> ExperimentConfig:
    """Validate a raw config mapping and fill defaults."""
    top_keys = {
        "task", "num_nodes", "alpha", "seed", "node", "ensemble", "distill",
        "central_hidden_dims", "repeats", "query_noise", "labeled_public",
        "rounds", "sweep",
    }
    _reject_unknown(doc, top_keys, "config")
    if "task" not in doc or not isinstance(doc["task"], dict):
        raise ConfigurationError("config needs a 'task' object")
    task_raw = dict(doc["task"])
    kind = task_raw.pop("kind", None)
    if kind == "synthetic":
        _reject_unknown(task_raw, SyntheticTask.__dataclass_fields__, "task")
        task = SyntheticTask(**task_raw)
        if task.num_classes < 2 or task.dim < 1:
            raise ConfigurationError("task.num_classes >= 2 and task.dim >= 1 required")
        for key in ("train_per_class", "test_per_class", "public_per_class"):
            if getattr(task, key) < 1:
                raise ConfigurationError(f"task.{key} must be >= 1")
    elif kind == "csv":
        _reject_unknown(task_raw, CsvTask.__dataclass_fields__, "task")
        try:
            task = CsvTask(**task_raw)
        except TypeError as exc:
            raise ConfigurationError(f"bad task section: {exc}") from None
        if task.task_type not in (SINGLE_LABEL, MULTI_LABEL):
            raise ConfigurationError(f"unknown task.task_type {task.task_type!r}")
    else:
        raise ConfigurationError("task.kind must be 'synthetic' or 'csv'")

    ens_raw = doc.get("ensemble", {})
    if not isinstance(ens_raw, dict):
        raise ConfigurationError("'ensemble' must be an object")
    _reject_unknown(ens_raw, EnsembleSection.__dataclass_fields__, "ensemble")
    ens = EnsembleSection(
        quant_scale=_off_or(ens_raw.get("quant_scale", 200), int, "ensemble.quant_scale"),
        gamma=_off_or(ens_raw.get("gamma", 1.0), float, "ensemble.gamma"),
        weight_mode=ens_raw.get("weight_mode", PER_CLASS),
    )
    if ens.weight_mode not in (PER_CLASS, UNIFORM):
        raise ConfigurationError(f"unknown ensemble.weight_mode {ens.weight_mode!r}")

    dis_raw = dict(doc.get("distill", {}))
    if not isinstance(dis_raw, dict):
        raise ConfigurationError("'distill' must be an object")
    dis_raw["tau"] = _parse_tau(dis_raw.get("tau"))
    dis = _section({"distill": dis_raw}, "distill", DistillSection)

    sweep = None
    if doc.get("sweep") is not None:
        sw = _section(doc, "sweep", SweepSection)
        if sw.param not in SWEEP_AXES:
            raise ConfigurationError(f"sweep.param must be one of {SWEEP_AXES}")
        if not sw.values or not sw.seeds:
            raise ConfigurationError("sweep.values and sweep.seeds must be non-empty")
        sweep = sw

    cfg = ExperimentConfig(
        task=task,
        num_nodes=int(doc.get("num_nodes", 5)),
        alpha=float(doc.get("alpha", 1.0)),
        seed=int(doc.get("seed", 0)),
        node=_section(doc, "node", NodeSection),
        ensemble=ens,
        distill=dis,
        central_hidden_dims=list(doc.get("central_hidden_dims", [64])),
        repeats=int(doc.get("repeats", 1)),
        query_noise=float(doc.get("query_noise", 0.0)),
        labeled_public=bool(doc.get("labeled_public", False)),
        rounds=int(doc.get("rounds", 30)),
        sweep=sweep,
    )
    if cfg.num_nodes < 1:
        raise ConfigurationError("num_nodes must be >= 1")
    if cfg.alpha <= 0:
        raise ConfigurationError("alpha must be > 0")
    if cfg.repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    if cfg.query_noise < 0:
        raise ConfigurationError("query_noise must be >= 0")
    if cfg.rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    # constructing the runtime configs surfaces their own validation now
    EnsembleConfig(ens.quant_scale, ens.gamma, ens.weight_mode)
    DistillConfig(dis.steps, dis.batch_size, dis.lr_start, dis.lr_end,
                  dis.weight_decay, dis.tau, dis.loss_mode,
                  task.task_type if isinstance(task, CsvTask) else SINGLE_LABEL)
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a JSON object")
    return parse_dict(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Round-trippable plain mapping; tau serializes as the string \"inf\"."""
    doc = asdict(cfg)
    doc["task"] = {"kind": "synthetic" if isinstance(cfg.task, SyntheticTask) else "csv",
                   **asdict(cfg.task)}
    if math.isinf(cfg.distill.tau):
        doc["distill"]["tau"] = "inf"
    if cfg.sweep is None:
        doc.pop("sweep")
    return doc


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest over everything except the seed, so one config maps to one
    digest across a seed sweep."""
    doc = config_to_dict(cfg)
    doc.pop("seed")
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# data assembly


def build_data(cfg: ExperimentConfig, seed: int):
    """Materialize (private, public, test, plan) for one run."""
    if isinstance(cfg.task, SyntheticTask):
        t = cfg.task
        means = t.class_sep * RandomStream(seed, (STREAM_TASK_MEANS,)).gauss(
            (t.num_classes, t.dim)
        ) / math.sqrt(t.dim)
        shift = np.full(t.dim, t.domain_shift / math.sqrt(t.dim))
        base = dict(num_classes=t.num_classes, dim=t.dim, class_means=means,
                    cov_scale=t.cov_scale)
        private = _gen_split(t.train_per_class, None, seed, STREAM_PRIVATE, base)
        test = _gen_split(t.test_per_class, None, seed, STREAM_TEST, base)
        public = _gen_split(t.public_per_class, shift, seed, STREAM_PUBLIC, base)
    else:
        t = cfg.task
        schema = CsvSchema(t.feature_cols, t.label_cols, t.task_type, t.num_classes)
        private = load_csv(t.private, schema)
        public = load_csv(t.public, schema)
        test = load_csv(t.test, schema)
    plan = dirichlet_partition(
        private, cfg.num_nodes, cfg.alpha, RandomStream(seed, (STREAM_PARTITION,))
    )
    return private, public, test, plan


def _gen_split(per_class: int, shift, seed: int, tag: int, base: dict) -> Dataset:
    spec = GaussianTaskSpec(per_class_count=per_class, domain_shift=shift, **base)
    return gen_gaussian_task(spec, RandomStream(seed, (tag,)))


def _layer_dims(cfg: ExperimentConfig, hidden: list[int]) -> list[int]:
    if isinstance(cfg.task, SyntheticTask):
        d, c = cfg.task.dim, cfg.task.num_classes
    else:
        d, c = len(cfg.task.feature_cols), cfg.task.num_classes
    return [d, *hidden, c]


def _node_train_config(cfg: ExperimentConfig) -> TrainConfig:
    n = cfg.node
    return TrainConfig(_layer_dims(cfg, n.hidden_dims), n.epochs, n.batch_size,
                       n.lr_start, n.lr_end, n.weight_decay)


def _task_type(cfg: ExperimentConfig) -> str:
    return cfg.task.task_type if isinstance(cfg.task, CsvTask) else SINGLE_LABEL


def execute_fedkd(cfg: ExperimentConfig, seed: int):
    private, public, test, plan = build_data(cfg, seed)
    d = cfg.distill
    run = FedKdRun(
        plan=plan,
        node_cfg=_node_train_config(cfg),
        ensemble_cfg=EnsembleConfig(cfg.ensemble.quant_scale, cfg.ensemble.gamma,
                                    cfg.ensemble.weight_mode),
        distill_cfg=DistillConfig(d.steps, d.batch_size, d.lr_start, d.lr_end,
                                  d.weight_decay, d.tau, d.loss_mode, _task_type(cfg)),
        central_dims=_layer_dims(cfg, cfg.central_hidden_dims),
        seed=seed,
        repeats=cfg.repeats,
        query_noise=cfg.query_noise or None,
        labeled_public=cfg.labeled_public,
    )
    public_arg = public if cfg.labeled_public else public.features
    return run_fedkd(run, private, public_arg, test)


def execute_fedavg(cfg: ExperimentConfig, seed: int):
    private, public, test, plan = build_data(cfg, seed)
    return run_fedavg(private, test, plan, _node_train_config(cfg), cfg.rounds, seed)


# ---------------------------------------------------------------------------
# subcommands


def _run_dir(out: Path, cfg: ExperimentConfig, seed: int, force: bool, algorithm: str) -> Path:
    rd = out / f"{algorithm}-{config_digest(cfg)[:12]}-s{seed}"
    if rd.exists() and not force:
        raise ConfigurationError(f"run directory {rd} exists (use --force to overwrite)")
    rd.mkdir(parents=True, exist_ok=True)
    return rd


def _write_run_artifacts(rd: Path, cfg: ExperimentConfig, seed: int, algorithm: str,
                         metrics: dict, ledger, trace) -> None:
    resolved = config_to_dict(cfg)
    resolved["seed"] = seed
    (rd / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    with (rd / "ledger.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "node_id", "bytes"])
        w.writerows(ledger.rows())

    trace_path = None
    if trace is not None:
        trace_path = "trace.jsonl"
        with (rd / trace_path).open("w") as fh:
            for rec in trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    body = dict(metrics)
    body.pop("bandwidth", None)  # the same report lands under "ledger"
    doc = {
        "algorithm": algorithm,
        "config_digest": config_digest(cfg),
        "seed": seed,
        "trace_path": trace_path,
        "ledger": ledger_report(ledger),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        **body,
    }
    (rd / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_run(cfg: ExperimentConfig, out: Path, seed: int, force: bool) -> Path:
    rd = _run_dir(out, cfg, seed, force, "fedkd")
    result = execute_fedkd(cfg, seed)
    _write_run_artifacts(rd, cfg, seed, "fedkd", result.metrics, result.ledger, result.trace)
    print(f"fedkd run written to {rd}")
    print(f"  central {result.metrics['metric']}: {result.metrics['central']:.4f}"
          f"  (standalone mean {result.metrics['standalone_mean']:.4f})")
    return rd


def cmd_fedavg(cfg: ExperimentConfig, out: Path, seed: int, force: bool) -> Path:
    rd = _run_dir(out, cfg, seed, force, "fedavg")
    result = execute_fedavg(cfg, seed)
    _write_run_artifacts(rd, cfg, seed, "fedavg", result.metrics, result.ledger, None)
    print(f"fedavg run written to {rd}")
    print(f"  global {result.metrics['metric']}: {result.metrics['central']:.4f}")
    return rd


def _apply_sweep_value(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    cell = copy.deepcopy(cfg)
    cell.sweep = None
    if param == "gamma":
        cell.ensemble.gamma = _off_or(value, float, "sweep value")
    elif param == "S":
        cell.ensemble.quant_scale = _off_or(value, int, "sweep value")
    elif param == "alpha":
        cell.alpha = float(value)
        if cell.alpha <= 0:
            raise ConfigurationError("alpha sweep values must be > 0")
    elif param == "K":
        cell.num_nodes = int(value)
        if cell.num_nodes < 1:
            raise ConfigurationError("K sweep values must be >= 1")
    elif param == "R":
        cell.repeats = int(value)
        if cell.repeats < 1:
            raise ConfigurationError("R sweep values must be >= 1")
    elif param == "d0":
        if not isinstance(cell.task, SyntheticTask):
            raise ConfigurationError("d0 sweep requires a synthetic task")
        size = int(value)
        c = cell.task.num_classes
        if size < c or size % c:
            raise ConfigurationError(f"d0 sweep value {size} must be a positive multiple of {c}")
        cell.task.public_per_class = size // c
    return cell


def cmd_ablate(cfg: ExperimentConfig, out: Path, force: bool) -> Path:
    if cfg.sweep is None:
        raise ConfigurationError("ablate needs a 'sweep' section in the config")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ablation.csv"
    if path.exists() and not force:
        raise ConfigurationError(f"{path} exists (use --force to overwrite)")
    rows = []
    for value in cfg.sweep.values:
        for seed in cfg.sweep.seeds:
            row = {"param": cfg.sweep.param, "value": "off" if value is None else value,
                   "seed": seed, "accuracy": "", "bandwidth": "", "error": ""}
            try:
                cell = _apply_sweep_value(cfg, cfg.sweep.param, value)
                result = execute_fedkd(cell, int(seed))
                row["accuracy"] = f"{result.metrics['central']:.6f}"
                row["bandwidth"] = result.ledger.total()
            except Exception as exc:  # a failed cell still gets its row
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["param", "value", "seed", "accuracy",
                                           "bandwidth", "error"])
        w.writeheader()
        w.writerows(rows)
    print(f"ablation sweep ({len(rows)} cells) written to {path}")
    return path


def cmd_report(out: Path) -> str:
    """Aggregate every run directory under ``out`` into a comparison table."""
    docs = []
    for metrics_path in sorted(out.glob("*/metrics.json")):
        docs.append(json.loads(metrics_path.read_text()))
    if not docs:
        raise ConfigurationError(f"no run directories with metrics.json under {out}")
    groups: dict[str, list[dict]] = {}
    for doc in docs:
        groups.setdefault(doc.get("algorithm", "?"), []).append(doc)
    lines = [f"{'method':<10}{'runs':>6}{'metric':>10}{'mean':>10}{'std':>9}"
             f"{'GB (1e9)':>12}{'GiB (2^30)':>12}"]
    for method in sorted(groups):
        vals = np.array([d["central"] for d in groups[method]], dtype=np.float64)
        total = np.mean([d["ledger"]["total_bytes"] for d in groups[method]])
        lines.append(
            f"{method:<10}{len(vals):>6}{groups[method][0].get('metric', '?'):>10}"
            f"{vals.mean():>10.4f}{vals.std():>9.4f}"
            f"{total / 1e9:>12.6f}{total / 2**30:>12.6f}"
        )
    table = "\n".join(lines)
    print(table)
    return table


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="fedkd",
        description="one-shot federated distillation experiments on desk-scale tasks",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name, needs_config in (("run", True), ("fedavg", True), ("ablate", True),
                               ("report", False)):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("--config", required=True, help="path to a JSON config")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
            p.add_argument("--force", action="store_true",
                           help="overwrite an existing run directory")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
    args = ap.parse_args(argv)

    try:
        out = Path(args.out)
        if args.command == "report":
            cmd_report(out)
            return 0
        cfg = parse_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        if args.command == "run":
            cmd_run(cfg, out, seed, args.force)
        elif args.command == "fedavg":
            cmd_fedavg(cfg, out, seed, args.force)
        elif args.command == "ablate":
            cmd_ablate(cfg, out, args.force)
        return 0
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedKdError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
