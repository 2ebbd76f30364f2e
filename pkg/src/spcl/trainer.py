"""Sequential continual-learning loop over a task stream.

Methods: plain fine-tuning (lower reference), joint training on the
union (upper reference), experience replay, and replay with
influence-weighted updates in a configurable window of final epochs,
optionally with influence-aware memory selection at task boundaries.

Randomness is split across four independent streams (init, data,
validation, memory) so that disabling the influence window leaves the
data/order stream untouched: er and metasp with a zero window produce
bit-identical trajectories at the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, TaskStream, accuracy_percent, make_batch
from .errors import ConfigError, NumericError
from .gradients import grad
from .influence import (
    InfluenceRecord,
    compute_influence,
    draw_pool,
    sample_validation,
)
from .memory import (
    MemoryBuffer,
    MemoryEntry,
    select_rehearsal,
    select_rehearsal_random,
    update_influence_stat,
)
from .models import ACTIVATIONS, MLPClassifier, ModelSpec

METHODS = ("finetune", "joint", "er", "metasp", "metasp_rehsel")
SETTINGS = ("task_incremental", "class_incremental")
REHEARSAL_METHODS = ("er", "metasp", "metasp_rehsel")


@dataclass
class TrainConfig:
    lr: float
    method: str
    setting: str
    buffer_capacity: int
    seed: int
    batch_size: int = 32
    epochs_per_task: int = 50
    metasp_last_epochs: int = 5
    pseudo_iterations: int = 1
    val_batch_sizes: tuple[int, int] = (32, 32)
    val_pool_fraction: float = 0.1
    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.val_batch_sizes = tuple(int(v) for v in self.val_batch_sizes)
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be >= 1")
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ConfigError("batch_size and epochs_per_task must be >= 1")
        if not 0 <= self.metasp_last_epochs <= self.epochs_per_task:
            raise ConfigError("metasp_last_epochs must be in [0, epochs_per_task]")
        if self.pseudo_iterations < 1:
            raise ConfigError("pseudo_iterations must be >= 1")
        if min(self.val_batch_sizes) < 1:
            raise ConfigError("validation batch sizes must be >= 1")
        if not 0.0 < self.val_pool_fraction <= 1.0:
            raise ConfigError("val_pool_fraction must be in (0, 1]")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class AccuracyMatrix:
    """r[t][k] = test accuracy (%) of task k+1 after training task t+1
    (lower triangle); pre[t] = accuracy of task t+1 just before its
    training began."""

    r: np.ndarray
    pre: np.ndarray


@dataclass
class MetricsReport:
    a1: float
    a_inf: float
    a_m: float
    bwt: float
    bwt_defined: bool
    full_matrix: bool
    stability_final: list[float] = field(default_factory=list)
    plasticity: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "a1": self.a1,
            "a_inf": self.a_inf,
            "a_m": self.a_m,
            "bwt": self.bwt,
            "bwt_defined": self.bwt_defined,
            "full_matrix": self.full_matrix,
            "stability_final": list(self.stability_final),
            "plasticity": list(self.plasticity),
        }


@dataclass
class StepInfluence:
    step: int
    record: InfluenceRecord


@dataclass
class RunResult:
    acc: AccuracyMatrix
    metrics: MetricsReport
    influence_steps: list[StepInfluence]
    memory_snapshots: dict[int, list[list]]
    warnings: list[str]
    params: object
    model: MLPClassifier


class _Rngs:
    """Independent deterministic streams per concern."""

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(4)
        self.init = np.random.default_rng(children[0])
        self.data = np.random.default_rng(children[1])
        self.val = np.random.default_rng(children[2])
        self.memory = np.random.default_rng(children[3])


def sgd_step(model, params, batch: Batch, lr: float):
    g = grad(model, params, batch)
    return params.with_flat(params.flat - lr * g.flat)


def influence_weighted_step(model, params, batch: Batch, i_fused: np.ndarray, lr: float):
    """Update with per-example weights 1/|B| - fused_influence: the mean
    loss contributes 1/|B| per example and the influence regularizer
    subtracts each example's fused influence."""
    n = len(batch)
    i_fused = np.asarray(i_fused, dtype=np.float64)
    if i_fused.shape != (n,):
        raise ConfigError("fused influence must align with the batch")
    weights = np.full(n, 1.0 / n) - i_fused
    if not np.isfinite(weights).all():
        raise NumericError("non-finite example weights in influence update")
    g = grad(model, params, batch, weights=weights)
    return params.with_flat(params.flat - lr * g.flat)


def _entries_to_batch(entries: list[MemoryEntry], stream: TaskStream) -> Batch:
    x = np.stack([e.features for e in entries])
    y = stream.labels_to_indices([e.label for e in entries])
    uids = np.asarray([e.uid for e in entries], dtype=np.int64)
    return Batch(x, y, uids)


def _concat_batches(a: Batch, b: Batch) -> Batch:
    return Batch(
        np.concatenate([a.x, b.x]),
        np.concatenate([a.y, b.y]),
        np.concatenate([a.uids, b.uids]),
    )


class _TaskStats:
    """Running fused-influence means for the current task's examples."""

    def __init__(self):
        self.mean: dict[int, float] = {}
        self.count: dict[int, int] = {}

    def observe(self, uid: int, value: float):
        c = self.count.get(uid, 0) + 1
        m = self.mean.get(uid, 0.0)
        self.count[uid] = c
        self.mean[uid] = m + (value - m) / c


def train_task(
    model,
    params,
    stream: TaskStream,
    task_id: int,
    memory: MemoryBuffer,
    config: TrainConfig,
    rngs: _Rngs,
    step_offset: int = 0,
):
    """One task's epochs; returns (params, influence logs, task stats,
    warnings, steps consumed)."""
    task = stream.tasks[task_id - 1]
    n = task.n_train
    steps_per_epoch = math.ceil(n / config.batch_size)
    uses_rehearsal = config.method in REHEARSAL_METHODS and task_id > 1
    window_start = config.epochs_per_task - config.metasp_last_epochs
    stats = _TaskStats()
    logs: list[StepInfluence] = []
    warnings: list[str] = []
    seen = np.zeros(n, dtype=bool)
    old_pool = None
    entry_by_uid = {e.uid: e for e in memory.entries}
    replacement_warned = False
    step = step_offset

    if uses_rehearsal and len(memory) == 0:
        raise ConfigError(
            f"method {config.method!r} needs a populated memory buffer at task {task_id}"
        )

    for epoch in range(config.epochs_per_task):
        metasp_epoch = (
            config.method in ("metasp", "metasp_rehsel")
            and task_id > 1
            and epoch >= window_start
        )
        perm = rngs.data.permutation(n)
        for s in range(steps_per_epoch):
            rows = perm[s * config.batch_size : (s + 1) * config.batch_size]
            b_new = stream.train_batch(task_id, rows)
            if uses_rehearsal:
                entries, replaced = memory.sample(config.batch_size, rngs.data)
                if replaced and not replacement_warned:
                    warnings.append(
                        f"task {task_id}: rehearsal batch sampled with replacement "
                        f"(|M|={len(memory)} < {config.batch_size})"
                    )
                    replacement_warned = True
                b_old = _entries_to_batch(entries, stream)
                combined = _concat_batches(b_old, b_new)
                task_ids = np.concatenate(
                    [
                        np.asarray([e.task_id for e in entries], dtype=np.int64),
                        np.full(len(b_new), task_id, dtype=np.int64),
                    ]
                )
            else:
                combined = b_new
                task_ids = np.full(len(b_new), task_id, dtype=np.int64)

            if metasp_epoch:
                if not seen.any():
                    seen[rows] = True  # very first batch seeds the pool
                if old_pool is None:
                    mem_x = np.stack([e.features for e in memory.entries])
                    mem_y = stream.labels_to_indices([e.label for e in memory.entries])
                    mem_uids = np.asarray([e.uid for e in memory.entries], dtype=np.int64)
                    old_pool = draw_pool(
                        mem_x, mem_y, mem_uids, config.val_pool_fraction, rngs.val
                    )
                pool_rows = np.flatnonzero(seen)
                new_pool = draw_pool(
                    task.train_x[pool_rows],
                    stream.labels_to_indices(task.train_y[pool_rows]),
                    task.train_uids[pool_rows],
                    config.val_pool_fraction,
                    rngs.val,
                )
                vb = sample_validation(old_pool, new_pool, config.val_batch_sizes, rngs.val)
                rec = compute_influence(
                    model,
                    params,
                    combined,
                    vb,
                    config.lr,
                    iterations=config.pseudo_iterations,
                    batch_task_ids=task_ids,
                )
                params = influence_weighted_step(model, params, combined, rec.i_fused, config.lr)
                logs.append(StepInfluence(step=step, record=rec))
                for idx, uid in enumerate(combined.uids):
                    obs = float(rec.i_fused[idx])
                    entry = entry_by_uid.get(int(uid))
                    if entry is not None:
                        update_influence_stat(entry, obs)
                    if task_ids[idx] == task_id:
                        stats.observe(int(uid), obs)
            else:
                params = sgd_step(model, params, combined, config.lr)

            seen[rows] = True
            step += 1

    return params, logs, stats, warnings, step


def _candidates_for_selection(task, stream: TaskStream, stats: _TaskStats):
    out = []
    for i in range(task.n_train):
        uid = int(task.train_uids[i])
        out.append(
            MemoryEntry(
                features=task.train_x[i].copy(),
                label=int(task.train_y[i]),
                task_id=task.task_id,
                uid=uid,
                influence_mean=stats.mean.get(uid, 0.0),
                influence_count=stats.count.get(uid, 0),
            )
        )
    return out


def compute_metrics(acc: AccuracyMatrix) -> MetricsReport:
    """First/final/mean-average accuracy and backward transfer.

    A joint-style matrix (only the final row filled) yields the final
    accuracy alone; the other metrics are reported as NaN with
    ``full_matrix=False``. A single task makes backward transfer
    undefined; it is reported as 0 with ``bwt_defined=False``.
    """
    r = acc.r
    t_total = r.shape[0]
    lower = [r[t][k] for t in range(t_total) for k in range(t + 1)]
    full = np.isfinite(lower).all() if lower else False
    final_row = r[t_total - 1]
    if not np.isfinite(final_row).all():
        raise ConfigError("accuracy matrix is missing final-row entries")
    a_inf = float(np.mean(final_row))
    if not full:
        return MetricsReport(
            a1=float("nan"),
            a_inf=a_inf,
            a_m=float("nan"),
            bwt=float("nan"),
            bwt_defined=False,
            full_matrix=False,
        )
    a1 = float(np.mean([r[t][t] for t in range(t_total)]))
    a_m = float(np.mean([np.mean(r[t][: t + 1]) for t in range(t_total)]))
    if t_total > 1:
        bwt = (t_total / (t_total - 1)) * (a_inf - a1)
        bwt_defined = True
    else:
        bwt = 0.0
        bwt_defined = False
    stability_final = [float(r[t_total - 1][k] - r[k][k]) for k in range(t_total - 1)]
    plasticity = [float(r[t][t] - acc.pre[t]) for t in range(t_total)]
    return MetricsReport(
        a1=a1,
        a_inf=a_inf,
        a_m=a_m,
        bwt=float(bwt),
        bwt_defined=bwt_defined,
        full_matrix=True,
        stability_final=stability_final,
        plasticity=plasticity,
    )


def _evaluate_row(model, params, stream, upto, setting, r):
    for k in range(1, upto + 1):
        r[upto - 1][k - 1] = accuracy_percent(model, params, stream, k, setting)


def run_stream(stream: TaskStream, config: TrainConfig) -> RunResult:
    """Train over the whole stream and collect the accuracy matrix,
    metrics, influence logs, and memory snapshots."""
    t_total = stream.num_tasks
    model = MLPClassifier(
        ModelSpec(
            input_dim=stream.input_dim,
            hidden_dims=config.hidden_dims,
            num_classes_total=stream.num_classes,
            activation=config.activation,
        )
    )
    rngs = _Rngs(config.seed)
    params = model.init_params(rngs.init)
    r = np.full((t_total, t_total), np.nan)
    pre = np.full(t_total, np.nan)
    memory = MemoryBuffer(config.buffer_capacity)
    influence_steps: list[StepInfluence] = []
    snapshots: dict[int, list[list]] = {}
    warnings: list[str] = []
    step = 0

    if config.method == "joint":
        for t in range(1, t_total + 1):
            pre[t - 1] = accuracy_percent(model, params, stream, t, config.setting)
        union_x = np.concatenate([task.train_x for task in stream.tasks])
        union_y = np.concatenate(
            [stream.labels_to_indices(task.train_y) for task in stream.tasks]
        )
        union_uids = np.concatenate([task.train_uids for task in stream.tasks])
        n = len(union_x)
        steps_per_epoch = math.ceil(n / config.batch_size)
        for _ in range(config.epochs_per_task):
            perm = rngs.data.permutation(n)
            for s in range(steps_per_epoch):
                rows = perm[s * config.batch_size : (s + 1) * config.batch_size]
                batch = make_batch(union_x[rows], union_y[rows], union_uids[rows])
                params = sgd_step(model, params, batch, config.lr)
        _evaluate_row(model, params, stream, t_total, config.setting, r)
    else:
        for t in range(1, t_total + 1):
            pre[t - 1] = accuracy_percent(model, params, stream, t, config.setting)
            params, logs, stats, task_warnings, step = train_task(
                model, params, stream, t, memory, config, rngs, step_offset=step
            )
            influence_steps.extend(logs)
            warnings.extend(task_warnings)
            _evaluate_row(model, params, stream, t, config.setting, r)
            if config.method in REHEARSAL_METHODS:
                candidates = _candidates_for_selection(stream.tasks[t - 1], stream, stats)
                if config.method == "metasp_rehsel":
                    report = select_rehearsal(memory, candidates, t, rngs.memory)
                else:
                    report = select_rehearsal_random(memory, candidates, t, rngs.memory)
                warnings.extend(f"task {t}: {w}" for w in report.warnings)
                snapshots[t] = memory.to_rows()
                memory.reset_influence_stats()

    acc = AccuracyMatrix(r=r, pre=pre)
    metrics = compute_metrics(acc)
    return RunResult(
        acc=acc,
        metrics=metrics,
        influence_steps=influence_steps,
        memory_snapshots=snapshots,
        warnings=warnings,
        params=params,
        model=model,
    )
