"""Artifact emission: CSV/JSON reports, influence statistics, figures.

Every CSV has a fixed header row and column order and is byte-identical
across reruns of the same configuration; timestamps live only in the
separate metadata file. Aggregate standard deviations use the
population formula (ddof=0) over seeds, reflected in the *_std_pop
column names.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .trainer import AccuracyMatrix, MetricsReport, StepInfluence


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_acc_matrix_csv(path, acc: AccuracyMatrix):
    t_total = acc.r.shape[0]
    header = ["after_task", "pre_acc"] + [f"acc_task_{k}" for k in range(1, t_total + 1)]
    rows = []
    for t in range(t_total):
        row = [t + 1, acc.pre[t]]
        for k in range(t_total):
            row.append(acc.r[t][k] if np.isfinite(acc.r[t][k]) else "")
        rows.append(row)
    write_csv(path, header, rows)


METRIC_COLUMNS = ("a1", "a_inf", "a_m", "bwt")


def write_metrics_csv(path, metrics: MetricsReport, method: str, seed: int):
    header = ["method", "seed", *METRIC_COLUMNS, "bwt_defined", "full_matrix"]
    row = [
        method,
        seed,
        metrics.a1,
        metrics.a_inf,
        metrics.a_m,
        metrics.bwt,
        metrics.bwt_defined,
        metrics.full_matrix,
    ]
    write_csv(path, header, [row])


def write_metrics_json(path, metrics: MetricsReport, method: str, seed: int):
    payload = {"method": method, "seed": seed, **metrics.to_dict()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


INFLUENCE_LOG_HEADER = ("step", "example_id", "task_id", "i_s", "i_p", "i_fused", "gamma_star")


def influence_log_rows(steps: list[StepInfluence]):
    for entry in steps:
        rec = entry.record
        for i, uid in enumerate(rec.batch_example_ids):
            yield (
                entry.step,
                int(uid),
                int(rec.batch_task_ids[i]),
                rec.i_s[i],
                rec.i_p[i],
                rec.i_fused[i],
                rec.gamma_star,
            )


def write_influence_log_csv(path, steps: list[StepInfluence]):
    write_csv(path, INFLUENCE_LOG_HEADER, influence_log_rows(steps))


def write_memory_snapshot_csv(path, rows):
    dim = len(rows[0]) - 4 if rows else 0
    header = ["task_id", "label", "influence_mean", "influence_count"] + [
        f"f_{i}" for i in range(dim)
    ]
    write_csv(path, header, rows)


ORACLE_HEADER = ("example_id", "meta_influence", "exact_influence", "loo_delta", "agree")


def write_oracle_report_csv(path, rows):
    write_csv(path, ORACLE_HEADER, rows)


# ---------------------------------------------------------------------------
# influence statistics (sign counts and the 5-bin histogram)

NUM_BINS = 5


@dataclass
class TaskInfluenceStats:
    task: int
    counts: dict = field(default_factory=dict)  # (metric, group, sign) -> int
    n_old: int = 0
    n_new: int = 0
    i_min: float = float("nan")
    i_max: float = float("nan")
    bin_counts: list[int] = field(default_factory=lambda: [0] * NUM_BINS)


@dataclass
class InfluenceHistogram:
    per_task: dict[int, TaskInfluenceStats] = field(default_factory=dict)
    empty: bool = False


def _bin_index(value, lo, hi):
    if hi <= lo:
        return 0
    idx = int((value - lo) / (hi - lo) * NUM_BINS)
    return min(idx, NUM_BINS - 1)


def influence_stats(steps: list[StepInfluence]) -> InfluenceHistogram:
    """Aggregate step logs into per-task expectations, then count signs
    and fill 5 equal-width bins from the minimum to the maximum fused
    influence."""
    if not steps:
        return InfluenceHistogram(empty=True)
    # running means per (train task, uid)
    acc: dict[int, dict[int, list]] = {}
    for entry in steps:
        rec = entry.record
        train_task = int(np.max(rec.batch_task_ids))
        bucket = acc.setdefault(train_task, {})
        for i, uid in enumerate(rec.batch_example_ids):
            slot = bucket.setdefault(
                int(uid), [0, 0.0, 0.0, 0.0, int(rec.batch_task_ids[i])]
            )
            slot[0] += 1
            c = slot[0]
            slot[1] += (float(rec.i_s[i]) - slot[1]) / c
            slot[2] += (float(rec.i_p[i]) - slot[2]) / c
            slot[3] += (float(rec.i_fused[i]) - slot[3]) / c

    hist = InfluenceHistogram()
    for train_task, bucket in sorted(acc.items()):
        stats = TaskInfluenceStats(task=train_task)
        fused_values = []
        for _, (count, m_s, m_p, m_f, origin) in sorted(bucket.items()):
            group = "new" if origin == train_task else "old"
            if group == "new":
                stats.n_new += 1
            else:
                stats.n_old += 1
            for metric, value in (("s", m_s), ("p", m_p), ("sp", m_f)):
                if value > 0:
                    key = (metric, group, "pos")
                elif value < 0:
                    key = (metric, group, "neg")
                else:
                    continue
                stats.counts[key] = stats.counts.get(key, 0) + 1
            fused_values.append(m_f)
        stats.i_min = float(min(fused_values))
        stats.i_max = float(max(fused_values))
        for v in fused_values:
            stats.bin_counts[_bin_index(v, stats.i_min, stats.i_max)] += 1
        hist.per_task[train_task] = stats
    return hist


HIST_HEADER = (
    ["task", "examples_old", "examples_new"]
    + [
        f"{metric}_{sign}_{group}"
        for group in ("old", "new")
        for metric in ("s", "p", "sp")
        for sign in ("pos", "neg")
    ]
    + ["i_min", "i_max"]
    + [f"bin_{i}" for i in range(1, NUM_BINS + 1)]
)


def write_influence_hist_csv(path, hist: InfluenceHistogram):
    rows = []
    for task, stats in sorted(hist.per_task.items()):
        row = [task, stats.n_old, stats.n_new]
        for group in ("old", "new"):
            for metric in ("s", "p", "sp"):
                for sign in ("pos", "neg"):
                    row.append(stats.counts.get((metric, group, sign), 0))
        row.extend([stats.i_min, stats.i_max])
        row.extend(stats.bin_counts)
        rows.append(row)
    write_csv(path, HIST_HEADER, rows)


# ---------------------------------------------------------------------------
# aggregation across seeds


def aggregate_metrics(per_seed: list[MetricsReport]):
    """Mean and population std per metric over seeds."""
    out = {}
    for name in METRIC_COLUMNS:
        values = np.asarray([getattr(m, name) for m in per_seed], dtype=np.float64)
        out[f"{name}_mean"] = float(np.mean(values))
        out[f"{name}_std_pop"] = float(np.std(values))
    return out


AGGREGATE_HEADER = ["method", "n_seeds"] + [
    f"{name}_{stat}" for name in METRIC_COLUMNS for stat in ("mean", "std_pop")
]


def aggregate_row(method: str, per_seed: list[MetricsReport]):
    agg = aggregate_metrics(per_seed)
    return [method, len(per_seed)] + [
        agg[f"{name}_{stat}"] for name in METRIC_COLUMNS for stat in ("mean", "std_pop")
    ]


def write_aggregate_csv(path, method: str, per_seed: list[MetricsReport]):
    write_csv(path, AGGREGATE_HEADER, [aggregate_row(method, per_seed)])


def write_comparison_csv(path, rows_by_method):
    write_csv(path, AGGREGATE_HEADER, rows_by_method)


def write_comparison_pairs_csv(path, pairs):
    """(method, seed, A1, A_inf) tuples for downstream front plots."""
    write_csv(path, ("method", "seed", "a1", "a_inf"), pairs)


# ---------------------------------------------------------------------------
# figures (rendered by the report path alongside the CSVs)


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_comparison_figure(path, rows_by_method):
    plt = _matplotlib()
    methods = [row[0] for row in rows_by_method]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.25
    xs = np.arange(len(methods))
    for offset, (name, col) in enumerate((("a1", 2), ("a_inf", 4), ("a_m", 6))):
        vals = [row[col] for row in rows_by_method]
        errs = [row[col + 1] for row in rows_by_method]
        ax.bar(xs + (offset - 1) * width, vals, width, yerr=errs, label=name, capsize=3)
    ax.set_xticks(xs)
    ax.set_xticklabels(methods, rotation=20)
    ax.set_ylabel("accuracy (%)")
    ax.set_title("metrics by method (mean over seeds, population std)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_accuracy_curves(path, curves_by_method):
    """curves_by_method: {method: list of mean average-accuracy after each
    task (NaN rows skipped for joint)}."""
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(7, 4))
    for method, curve in curves_by_method.items():
        xs = [i + 1 for i, v in enumerate(curve) if np.isfinite(v)]
        ys = [v for v in curve if np.isfinite(v)]
        if xs:
            ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel("tasks trained")
    ax.set_ylabel("average accuracy over seen tasks (%)")
    ax.set_title("learning trajectory")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_influence_hist_figure(path, hist: InfluenceHistogram, method: str):
    plt = _matplotlib()
    tasks = sorted(hist.per_task)
    fig, axes = plt.subplots(1, max(len(tasks), 1), figsize=(3 * max(len(tasks), 1), 3))
    if len(tasks) <= 1:
        axes = [axes]
    for ax, task in zip(axes, tasks):
        stats = hist.per_task[task]
        ax.bar(range(1, NUM_BINS + 1), stats.bin_counts, color="tab:blue")
        ax.set_title(f"task {task}")
        ax.set_xlabel("influence bin")
    axes[0].set_ylabel("examples")
    fig.suptitle(f"fused-influence distribution ({method})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
