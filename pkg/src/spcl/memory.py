"""Fixed-budget episodic memory with random and influence-aware selection.

After finishing task t the capacity is split into per-task quotas
(floor(|M|/t) each, remainder to the earliest tasks). Selection follows
a pop-before-push discipline: for each incoming slot the currently most
harmful over-quota entry is dropped first, then the best candidate of
the matching cluster is stored. Influence statistics are running means
of the fused influence observed while an example sat in a training
batch; more negative means more beneficial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .kmeans import kmeans


@dataclass(eq=False)
class MemoryEntry:
    features: np.ndarray
    label: int
    task_id: int
    uid: int
    influence_mean: float = 0.0
    influence_count: int = 0


@dataclass
class SelectionReport:
    task_id: int
    inserted_uids: list[int] = field(default_factory=list)
    dropped_uids: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def update_influence_stat(entry: MemoryEntry, observed: float) -> MemoryEntry:
    """Fold one fused-influence observation into the running mean."""
    if not np.isfinite(observed):
        raise NumericError(f"non-finite influence observation for uid {entry.uid}")
    entry.influence_count += 1
    entry.influence_mean += (float(observed) - entry.influence_mean) / entry.influence_count
    return entry


def quotas(capacity: int, t: int) -> list[int]:
    """Per-task entry counts after task t; remainder goes to tasks 1..r."""
    base, rem = divmod(capacity, t)
    return [base + (1 if j < rem else 0) for j in range(t)]


class MemoryBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("memory capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []

    def __len__(self):
        return len(self.entries)

    def counts_by_task(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.task_id] = counts.get(e.task_id, 0) + 1
        return counts

    def uids(self) -> set[int]:
        return {e.uid for e in self.entries}

    def sample(self, size: int, rng) -> tuple[list[MemoryEntry], bool]:
        """Uniform sample of entries; falls back to sampling with
        replacement when the buffer is smaller than the request."""
        if not self.entries:
            raise ConfigError("cannot sample from an empty memory buffer")
        replace = len(self.entries) < size
        idx = rng.choice(len(self.entries), size=size, replace=replace)
        return [self.entries[i] for i in idx], replace

    def reset_influence_stats(self):
        for e in self.entries:
            e.influence_mean = 0.0
            e.influence_count = 0

    def to_rows(self) -> list[list]:
        """CSV rows: task_id, label, influence_mean, influence_count, features..."""
        return [
            [e.task_id, e.label, e.influence_mean, e.influence_count, *e.features.tolist()]
            for e in self.entries
        ]


def _surplus(buffer: MemoryBuffer, t: int) -> dict[int, int]:
    target = quotas(buffer.capacity, t)
    counts = buffer.counts_by_task()
    return {j: max(0, counts.get(j, 0) - target[j - 1]) for j in range(1, t)}


def _remove_entry(buffer: MemoryBuffer, victim: MemoryEntry):
    for i, e in enumerate(buffer.entries):
        if e is victim:
            buffer.entries.pop(i)
            return
    raise ConfigError("selection tried to drop an entry not in the buffer")


def _apply_selection(buffer, incoming, drop_next, report):
    """Shared loop: one pop (when over quota) before each push."""
    for candidate in incoming:
        if candidate.uid in buffer.uids():
            report.warnings.append(f"skipped duplicate uid {candidate.uid}")
            continue
        victim = drop_next()
        if victim is not None:
            report.dropped_uids.append(victim.uid)
            _remove_entry(buffer, victim)
        buffer.entries.append(candidate)
        report.inserted_uids.append(candidate.uid)
        if len(buffer) > buffer.capacity:
            raise ConfigError("memory capacity exceeded during selection")


def select_rehearsal(buffer: MemoryBuffer, new_task_data, task_id: int, seed) -> SelectionReport:
    """Influence-aware end-of-task selection.

    Clusters the finished task's training data into quota-many groups,
    stores each group's most beneficial example (lowest running mean,
    ties by insertion order) and drops the buffer's most harmful
    over-quota entries (highest mean first), one pop per push.
    """
    report = SelectionReport(task_id=task_id)
    if not new_task_data:
        report.warnings.append("empty new task data; selection skipped")
        return report
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    candidates = list(new_task_data)
    target = quotas(buffer.capacity, task_id)
    k = min(target[task_id - 1], len(candidates))
    if k == 0:
        report.warnings.append("zero quota for new task; selection skipped")
        return report

    feats = np.stack([c.features.ravel() for c in candidates])
    assign, _ = kmeans(feats, k, rng)
    incoming = []
    for ci in range(k):
        members = [i for i in range(len(candidates)) if assign[i] == ci]
        best = min(members, key=lambda i: (candidates[i].influence_mean, i))
        incoming.append(candidates[best])

    surplus = _surplus(buffer, task_id)
    ranked = [
        e
        for _, e in sorted(
            enumerate(buffer.entries), key=lambda t: (-t[1].influence_mean, t[0])
        )
    ]

    def victims():
        for e in ranked:
            if surplus.get(e.task_id, 0) > 0:
                surplus[e.task_id] -= 1
                yield e

    victim_iter = victims()

    def drop_next():
        return next(victim_iter, None)

    _apply_selection(buffer, incoming, drop_next, report)
    return report


def select_rehearsal_random(
    buffer: MemoryBuffer, new_task_data, task_id: int, seed
) -> SelectionReport:
    """Quota-respecting baseline: uniform random storing and dropping."""
    report = SelectionReport(task_id=task_id)
    if not new_task_data:
        report.warnings.append("empty new task data; selection skipped")
        return report
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    candidates = list(new_task_data)
    target = quotas(buffer.capacity, task_id)
    k = min(target[task_id - 1], len(candidates))
    if k == 0:
        report.warnings.append("zero quota for new task; selection skipped")
        return report

    chosen = rng.choice(len(candidates), size=k, replace=False)
    incoming = [candidates[int(i)] for i in chosen]
    surplus = _surplus(buffer, task_id)

    def drop_next():
        eligible = [e for e in buffer.entries if surplus.get(e.task_id, 0) > 0]
        if not eligible:
            return None
        victim = eligible[int(rng.integers(len(eligible)))]
        surplus[victim.task_id] -= 1
        return victim

    _apply_selection(buffer, incoming, drop_next, report)
    return report
