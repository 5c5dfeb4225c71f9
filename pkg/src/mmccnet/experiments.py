"""Experiment protocols (hold-out, k-fold, repeated runs, sweeps) and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from .data import DataError, SamplePair, make_splits
from .metrics import METRIC_KEYS, RunStatistics, aggregate_runs
from .model import VARIANTS, ModelConfig
from .training import LEARNING_RATE_GRID, TrainPlan, build_and_train, evaluate

logger = logging.getLogger(__name__)

PROTOCOLS = ("holdout", "kfold5", "multirun10", "ablate", "loss_sweep", "optimizer_sweep", "lr_sweep")
SWEEP_LOSSES = ("bce", "dice", "joint", "joint_l2")
SWEEP_OPTIMIZERS = ("sgd", "adam")
# ratio metrics are reported in percent, distances in pixels
PERCENT_METRICS = frozenset(METRIC_KEYS) | {"auc"}


@dataclass
class ExperimentSpec:
    protocol: str = "holdout"
    runs: int | None = None
    seed: int = 0
    folds: int = 5
    variants: tuple[str, ...] = tuple(VARIANTS)
    losses: tuple[str, ...] = SWEEP_LOSSES
    optimizers: tuple[str, ...] = SWEEP_OPTIMIZERS
    learning_rates: tuple[float, ...] = LEARNING_RATE_GRID

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.runs is not None and self.runs < 1:
            raise ValueError("runs must be at least 1")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        for name in ("variants", "losses", "optimizers", "learning_rates"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def run_count(self) -> int:
        if self.runs is not None:
            return self.runs
        return 10 if self.protocol == "multirun10" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunResult:
    metrics: dict[str, float]
    train_log: str | None = None


# (train, val, test, model_config, plan) -> RunResult
Fitter = Callable[[list, list, list, ModelConfig, TrainPlan], RunResult]


def default_fitter(train, val, test, model_config: ModelConfig, plan: TrainPlan) -> RunResult:
    model, log = build_and_train(train, val, model_config, plan)
    return RunResult(evaluate(model, test, plan.threshold, plan.batch_size).means, log.to_csv())


@dataclass
class Condition:
    label: str
    model_config: ModelConfig
    plan: TrainPlan


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    runs: dict[str, list[dict[str, float]]] = field(default_factory=dict)

    def statistics(self) -> dict[str, dict[str, RunStatistics]]:
        return {label: aggregate_runs(rs) for label, rs in self.runs.items()}


def conditions(spec: ExperimentSpec, model_config: ModelConfig, plan: TrainPlan) -> list[Condition]:
    p = spec.protocol
    if p in ("holdout", "multirun10", "kfold5"):
        return [Condition(p, model_config, plan)]
    if p == "ablate":
        return [Condition(v, ModelConfig.for_variant(v, model_config), plan) for v in spec.variants]
    if p == "loss_sweep":
        return [Condition(k, model_config, replace(plan, loss=k)) for k in spec.losses]
    if p == "optimizer_sweep":
        return [Condition(k, model_config, replace(plan, optimizer=k)) for k in spec.optimizers]
    return [Condition(f"lr={lr:g}", model_config, replace(plan, lr=lr)) for lr in spec.learning_rates]


def _partitions(spec: ExperimentSpec, samples: list[SamplePair], test_samples: list[SamplePair] | None):
    """Yield ``(train, val, test)`` triples; one per fold for k-fold, else one."""
    by_id = {s.id: s for s in samples}
    if spec.protocol == "kfold5":
        plan = make_splits(list(by_id), "kfold", k=spec.folds, seed=spec.seed)
        folds = plan.folds()
        for i, fold in enumerate(folds):
            train = [by_id[j] for f, ids in enumerate(folds) if f != i for j in ids]
            yield train, [], [by_id[j] for j in fold]
        return
    if test_samples is not None:
        yield samples, [], test_samples
        return
    plan = make_splits(list(by_id), "table1", seed=spec.seed)
    train, val, test = ([by_id[i] for i in plan.members(r)] for r in ("train", "val", "test"))
    if not train or not test:
        raise DataError(f"{len(samples)} samples are too few for a train/val/test split")
    yield train, val, test


def run_experiment(
    spec: ExperimentSpec,
    samples: list[SamplePair],
    model_config: ModelConfig,
    plan: TrainPlan,
    out_dir=None,
    test_samples: list[SamplePair] | None = None,
    fitter: Fitter = default_fitter,
) -> ExperimentResult:
    """Run every condition of the protocol and (optionally) write run files and reports.

    Run ``r`` of a condition uses seed ``spec.seed + r`` for both weight
    initialisation and batch order. For k-fold protocols each fold counts as
    one run of the condition, so the report averages across folds.
    """
    if not samples:
        raise DataError("no samples supplied")
    parts = list(_partitions(spec, samples, test_samples))
    result = ExperimentResult(spec)
    for order, cond in enumerate(conditions(spec, model_config, plan)):
        metrics = []
        for r in range(spec.run_count):
            seed = spec.seed + r
            mc = replace(cond.model_config, init_seed=seed)
            tp = replace(cond.plan, seed=seed)
            for f, (train, val, test) in enumerate(parts):
                logger.info("%s run %d part %d: %d train / %d val / %d test", cond.label, r, f, len(train), len(val), len(test))
                res = fitter(train, val, test, mc, tp)
                metrics.append(dict(res.metrics))
                if out_dir is not None:
                    name = f"run-{r:02d}" if len(parts) == 1 else f"run-{r:02d}-fold-{f}"
                    _write_run(Path(out_dir) / "runs" / cond.label / name, cond.label, order, res)
        result.runs[cond.label] = metrics
    if out_dir is not None:
        write_reports(result.runs, out_dir)
        Path(out_dir, "summary.json").write_text(
            json.dumps(dict(spec=spec.to_dict(), runs=result.runs), indent=2, sort_keys=True) + "\n"
        )
    return result


def _write_run(run_dir: Path, label: str, order: int, res: RunResult) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.json").write_text(
        json.dumps(dict(condition=label, order=order, metrics=res.metrics), indent=2, sort_keys=True) + "\n"
    )
    if res.train_log is not None:
        (run_dir / "train_log.csv").write_text(res.train_log)


# -- reports ------------------------------------------------------------------


def collect_runs(root) -> dict[str, list[dict[str, float]]]:
    """Read every ``metrics.json`` below ``root`` grouped by condition.

    Conditions keep their recorded order; runs are ordered by path.
    """
    root = Path(root)
    found = sorted(root.rglob("metrics.json"))
    if not found:
        raise DataError(f"no metrics.json files under {root}")
    grouped: dict[str, tuple[int, list]] = {}
    for path in found:
        rec = json.loads(path.read_text())
        try:
            label = rec.get("condition") or path.parent.parent.name
            metrics = rec["metrics"]
        except (AttributeError, KeyError) as exc:
            raise DataError(f"{path}: not a run metrics file") from exc
        grouped.setdefault(label, (rec.get("order", 0), []))[1].append(metrics)
    ordered = sorted(grouped.items(), key=lambda kv: (kv[1][0], kv[0]))
    return {label: runs for label, (_, runs) in ordered}


def format_cell(stat: RunStatistics, metric: str) -> str:
    return stat.format_cell(scale=100.0 if metric in PERCENT_METRICS else 1.0)


def report_tables(runs: dict[str, list[dict[str, float]]]) -> tuple[str, str]:
    """CSV and markdown tables with one ``mean ± SD, (low, high)`` cell per metric."""
    stats = {label: aggregate_runs(rs) for label, rs in runs.items()}
    metric_names = list(next(iter(stats.values())))
    header = ["condition", "runs", *metric_names]
    rows = []
    for label, per_metric in stats.items():
        if list(per_metric) != metric_names:
            raise DataError(f"condition {label!r} reports different metrics")
        rows.append([label, str(len(runs[label]))] + [format_cell(per_metric[m], m) for m in metric_names])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(r) + " |" for r in rows]
    return buf.getvalue(), "\n".join(md) + "\n"


def write_reports(runs: dict[str, list[dict[str, float]]], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_text, md_text = report_tables(runs)
    csv_path, md_path = out / "report.csv", out / "report.md"
    csv_path.write_bytes(csv_text.encode())
    md_path.write_bytes(md_text.encode())
    return csv_path, md_path
