"""Experiment orchestration: configs, task-order sweeps, CSV/JSON reports.

Seed splitting. Everything derives from one master seed ``S`` through
``numpy.random.SeedSequence([S, purpose, ...])``:

* synthetic data and permutations: ``[S, 0xDA7A]``
* task-order sampling:             ``[S, 0x0D3E]``
* run (order ``o``, repeat ``r``):   ``[S, 0x5EED, o, r]`` -- used for network
  initialisation, re-initialisation and mini-batch shuffling of that run.

Runs therefore do not depend on how many workers execute them or in which order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from .errors import ConfigError
from .metrics import AccuracyMatrix, AggregateReport, RunRecord, aggregate_over_orders, doi, la_accuracy
from .network import NetworkConfig
from .trainer import TrainConfig, derive_seed, run_sequence

log = logging.getLogger(__name__)

CSV_COLUMNS = ("order_id", "repeat", "absolute_pos", "task_identity", "learning_step", "accuracy")
SUITES = ("synthetic", "synthetic_images", "split_mnist", "permuted_mnist", "split_cifar10")
MODES = ("sequence", "reinit_ablation")

_DATA, _ORDERS, _RUN = 0xDA7A, 0x0D3E, 0x5EED


@dataclass
class ExperimentConfig:
    # experiment
    suite: str = "synthetic"
    mode: str = "sequence"
    seed: int = 0
    orders: int = 1
    repeats: int = 1
    exhaustive: bool = False
    unique_orders: bool = False
    pin_first: int | None = None
    workers: int = 1
    data_dir: str | None = None
    # tasks
    n_tasks: int = 5
    dims: int = 20
    classes_per_task: int = 2
    train_per_task: int = 500
    test_per_task: int = 200
    spread: float = 4.0
    image_size: int = 16
    class_groups: list | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    # network
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [100, 100])
    channels: list = field(default_factory=lambda: [32, 32, 64, 64, 128, 128])
    dense_width: int = 256
    channel_multiplier: int = 1
    head_relu_importance: bool = False
    # training
    alpha: float = 0.0045
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    reinit: bool = False
    merge_policy: str = "max"
    epsilon: float = 1e-6
    importance: str = "ours"
    si_damping: float = 0.1
    fisher_samples: int | None = 1000
    mas_samples: int | None = 1000

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ConfigError(f"suite: expected one of {SUITES}, got {self.suite!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        for key in ("orders", "repeats", "workers", "n_tasks"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        # validate the derived configs early so errors name the offending key
        self.train_config(0)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in mapping:
            if key not in known:
                raise ConfigError(f"unknown config key: {key!r}")
        return cls(**mapping)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a flat key/value mapping")
        for key, value in doc.items():
            if isinstance(value, dict):
                raise ConfigError(f"config key {key!r}: nested sections are not supported")
        return cls.from_mapping(doc)

    def digest(self) -> str:
        doc = asdict(self)
        for key in ("workers", "data_dir"):
            doc.pop(key)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           seed=seed, reinit=self.reinit, merge_policy=self.merge_policy, epsilon=self.epsilon,
                           importance=self.importance, si_damping=self.si_damping,
                           fisher_samples=self.fisher_samples, mas_samples=self.mas_samples)

    def network_config(self, input_shape, seed: int) -> NetworkConfig:
        return NetworkConfig(arch=self.arch, input_shape=tuple(input_shape), hidden=tuple(self.hidden),
                             channels=tuple(self.channels), dense_width=self.dense_width,
                             channel_multiplier=self.channel_multiplier, seed=seed,
                             head_relu_importance=self.head_relu_importance)


# ----------------------------------------------------------------------------
# task construction
# ----------------------------------------------------------------------------

def _default_groups(n_tasks: int, per_task: int) -> list[list[int]]:
    return [list(range(i * per_task, (i + 1) * per_task)) for i in range(n_tasks)]


def build_tasks(cfg: ExperimentConfig) -> list[D.TaskSpec]:
    data_seed = derive_seed(cfg.seed, _DATA)
    if cfg.suite == "synthetic":
        return D.synthetic_gaussian_tasks(cfg.n_tasks, cfg.dims, cfg.classes_per_task, cfg.train_per_task,
                                          cfg.test_per_task, data_seed, cfg.spread)
    if cfg.suite == "synthetic_images":
        return D.synthetic_image_tasks(cfg.n_tasks, cfg.image_size, cfg.train_per_task, cfg.test_per_task,
                                       data_seed)
    if cfg.suite in ("split_mnist", "permuted_mnist"):
        train, test = D.load_mnist(cfg.data_dir)
    else:
        train, test = D.load_cifar10(cfg.data_dir)
    if cfg.suite == "permuted_mnist":
        tasks = D.permuted_tasks(train, test, cfg.n_tasks, data_seed)
    else:
        groups = cfg.class_groups or _default_groups(cfg.n_tasks, cfg.classes_per_task)
        tasks = D.split_by_classes(train, test, groups)
    if cfg.train_limit is not None or cfg.test_limit is not None:
        tasks = [D.limit_samples(t, cfg.train_limit, cfg.test_limit, data_seed) for t in tasks]
    return tasks


def build_orders(cfg: ExperimentConfig, tasks) -> list[D.TaskSequence]:
    if cfg.orders == 1 and not cfg.exhaustive and cfg.pin_first is None:
        return [D.TaskSequence(list(tasks), 0, None)]
    return D.shuffle_orders(tasks, None if cfg.exhaustive else cfg.orders, derive_seed(cfg.seed, _ORDERS),
                            exhaustive=cfg.exhaustive, unique=cfg.unique_orders, pin_first=cfg.pin_first)


# ----------------------------------------------------------------------------
# execution
# ----------------------------------------------------------------------------

_WORKER_TASKS: dict = {}


def _init_worker(tasks):
    _WORKER_TASKS.clear()
    _WORKER_TASKS.update({t.task_id: t for t in tasks})


def run_one(cfg: ExperimentConfig, order: list[int], order_id: int, repeat: int,
            tasks_by_id: dict | None = None, reinit: bool | None = None) -> RunRecord:
    tasks_by_id = tasks_by_id if tasks_by_id is not None else _WORKER_TASKS
    seed = derive_seed(cfg.seed, _RUN, order_id, repeat)
    seq = [tasks_by_id[t] for t in order]
    tcfg = cfg.train_config(seed)
    if reinit is not None:
        tcfg.reinit = reinit
    start = time.perf_counter()
    run = run_sequence(seq, tcfg, cfg.network_config(seq[0].train.input_shape, seed))
    return RunRecord(order_id, repeat, [t.identity for t in seq], run.matrix, cfg.digest(), seed,
                     time.perf_counter() - start)


def _jobs(cfg, orders, reinit=None):
    return [(cfg, seq.order, seq.order_id, r, None, reinit) for seq in orders for r in range(cfg.repeats)]


def execute(cfg: ExperimentConfig, tasks, orders, reinit: bool | None = None) -> list[RunRecord]:
    """Run every (order, repeat) pair, serially or on a process pool; results sorted by (order, repeat)."""
    jobs = _jobs(cfg, orders, reinit)
    if cfg.workers <= 1 or len(jobs) == 1:
        by_id = {t.task_id: t for t in tasks}
        records = [run_one(*job[:4], by_id, reinit) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker, initargs=(list(tasks),)) as pool:
            records = list(pool.map(run_one, *zip(*jobs)))
    return sorted(records, key=lambda r: (r.order_id, r.repeat))


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        for k, j, acc in rec.matrix.cells():
            writer.writerow([rec.order_id, rec.repeat, k + 1, rec.order[k], j + 1, f"{acc:.4f}"])
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    """Rebuild accuracy matrices from the per-cell CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ConfigError(f"unexpected CSV columns {tuple(rows[0].keys())}")
    grouped: dict[tuple[int, int], list[dict]] = {}
    for row in rows:
        grouped.setdefault((int(row["order_id"]), int(row["repeat"])), []).append(row)
    records = []
    for (oid, rep), cells in sorted(grouped.items()):
        n = max(int(c["learning_step"]) for c in cells)
        values = np.full((n, n), np.nan)
        order = [""] * n
        for c in cells:
            k, j = int(c["absolute_pos"]) - 1, int(c["learning_step"]) - 1
            values[k, j] = float(c["accuracy"])
            order[k] = c["task_identity"]
        records.append(RunRecord(oid, rep, order, AccuracyMatrix(values)))
    return records


def report_dict(report: AggregateReport, records) -> dict:
    doc = report.to_dict()
    doc["positions"] = [
        {"absolute_pos": k + 1, "la_mean": report.la_mean[k], "la_std": report.la_std[k],
         "doi_mean": report.doi_mean[k] if k < len(report.doi_mean) else None,
         "doi_std": report.doi_std[k] if k < len(report.doi_std) else None}
        for k in range(report.n_tasks)
    ]
    doc["runs"] = [
        {"order_id": r.order_id, "repeat": r.repeat, "order": r.order, "seed": r.seed,
         "config_digest": r.config_digest,
         "la": [la_accuracy(r.matrix, k) for k in range(1, r.matrix.n + 1)],
         "doi": [doi(r.matrix, k) for k in range(1, r.matrix.n)]}
        for r in records
    ]
    return doc


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_outputs(records, out_dir, prefix: str = "") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = aggregate_over_orders(records)
    (out / f"{prefix}results.csv").write_text(records_to_csv(records))
    (out / f"{prefix}aggregate.json").write_text(_dump_json(report_dict(report, records)))
    (out / f"{prefix}timing.json").write_text(_dump_json(
        {f"{r.order_id}:{r.repeat}": r.wall_time for r in records}))
    return report_dict(report, records)


def ablation_rows(with_reinit, without_reinit) -> list[dict]:
    """Final-step accuracy difference (re-init minus no re-init) per run and absolute position."""
    rows = []
    for a, b in zip(with_reinit, without_reinit):
        n = a.matrix.n
        for k in range(n):
            acc_a, acc_b = a.matrix[k, n - 1], b.matrix[k, n - 1]
            rows.append({"order_id": a.order_id, "repeat": a.repeat, "absolute_pos": k + 1,
                         "task_identity": a.order[k], "acc_reinit": f"{acc_a:.4f}",
                         "acc_no_reinit": f"{acc_b:.4f}", "difference": f"{acc_a - acc_b:.4f}"})
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[RunRecord]:
    """Build tasks and orders, execute all runs, and write reports when ``out_dir`` is given."""
    tasks = build_tasks(cfg)
    orders = build_orders(cfg, tasks)
    if cfg.mode == "reinit_ablation":
        with_r = execute(cfg, tasks, orders, reinit=True)
        without_r = execute(cfg, tasks, orders, reinit=False)
        if out_dir is not None:
            write_outputs(with_r, out_dir, "reinit_")
            write_outputs(without_r, out_dir, "noreinit_")
            rows = ablation_rows(with_r, without_r)
            buf = io.StringIO()
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
            (Path(out_dir) / "ablation.csv").write_text(buf.getvalue())
        return with_r + without_r
    records = execute(cfg, tasks, orders)
    if out_dir is not None:
        write_outputs(records, out_dir)
    return records
