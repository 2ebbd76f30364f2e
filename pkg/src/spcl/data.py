"""Task streams, batches, and evaluation-time logit masking.

Streams are split-style: class sets are disjoint across tasks, every
task carries its own train/test split, and generation is a pure function
of (config, seed). Labels stored in datasets are raw class ids; batches
carry 0-based logit indices plus a global example uid used by the
influence log and the memory buffer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SETTINGS = ("task_incremental", "class_incremental")


@dataclass(frozen=True)
class Batch:
    """Mini-batch with 0-based label indices into the shared logit head."""

    x: np.ndarray
    y: np.ndarray
    uids: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2:
            raise ConfigError(f"batch features must be 2-d, got shape {self.x.shape}")
        if len(self.x) == 0:
            raise ConfigError("batch must be non-empty")
        if len(self.y) != len(self.x) or len(self.uids) != len(self.x):
            raise ConfigError("batch fields must have equal length")

    def __len__(self):
        return len(self.x)


def make_batch(x, y, uids=None) -> Batch:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if uids is None:
        uids = np.arange(len(y), dtype=np.int64)
    return Batch(x, y, np.asarray(uids, dtype=np.int64))


@dataclass
class TaskDataset:
    task_id: int  # 1-based
    train_x: np.ndarray
    train_y: np.ndarray  # raw class ids
    test_x: np.ndarray
    test_y: np.ndarray
    class_ids: frozenset
    train_uids: np.ndarray = field(default=None)

    @property
    def n_train(self) -> int:
        return len(self.train_x)

    @property
    def n_test(self) -> int:
        return len(self.test_x)


@dataclass
class TaskStream:
    tasks: list[TaskDataset]
    setting: str = "task_incremental"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}")
        for i, task in enumerate(self.tasks, start=1):
            if task.task_id != i:
                raise ConfigError("task ids must be 1..T consecutive")
        all_classes = sorted(c for t in self.tasks for c in t.class_ids)
        if len(all_classes) != len(set(all_classes)):
            raise ConfigError("class ids must be disjoint across tasks")
        self.class_to_index = {c: i for i, c in enumerate(all_classes)}
        self.index_to_class = np.asarray(all_classes)
        # assign global uids by position across the stream
        offset = 0
        for task in self.tasks:
            task.train_uids = np.arange(offset, offset + task.n_train, dtype=np.int64)
            offset += task.n_train

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return len(self.class_to_index)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].train_x.shape[1]

    def labels_to_indices(self, y) -> np.ndarray:
        return np.asarray([self.class_to_index[int(c)] for c in np.asarray(y)], dtype=np.int64)

    def train_batch(self, task_id: int, rows) -> Batch:
        task = self.tasks[task_id - 1]
        rows = np.asarray(rows, dtype=np.int64)
        return Batch(
            task.train_x[rows],
            self.labels_to_indices(task.train_y[rows]),
            task.train_uids[rows],
        )


# ---------------------------------------------------------------------------
# generators


def _spread_means(rng, num_classes, dim, separation, max_tries=200):
    """Class means on a sphere of radius ~separation with pairwise distance
    >= separation where geometry allows; falls back to the best candidate
    after max_tries draws. Radius (not variance) scaling keeps feature
    magnitudes bounded by O(separation) in any dimension."""
    radius = 0.75 * separation
    means = []
    for _ in range(num_classes):
        best, best_d = None, -1.0
        for _ in range(max_tries):
            direction = rng.normal(size=dim)
            norm = np.linalg.norm(direction)
            if norm == 0.0:
                continue
            cand = radius * direction / norm
            d = min((np.linalg.norm(cand - m) for m in means), default=np.inf)
            if d >= separation:
                best = cand
                break
            if d > best_d:
                best, best_d = cand, d
        means.append(best)
    return np.asarray(means)


def make_split_gaussians(
    num_tasks: int,
    classes_per_task: int,
    dim: int,
    n_train: int,
    n_test: int,
    separation: float,
    seed: int,
) -> TaskStream:
    """Unit-variance Gaussian blobs, ``classes_per_task`` fresh classes per
    task. ``n_train``/``n_test`` are per task, divided across the task's
    classes with the remainder going to the earliest classes."""
    if min(num_tasks, classes_per_task, dim, n_train, n_test) < 1:
        raise ConfigError("all split-gaussian counts must be >= 1")
    if separation <= 0:
        raise ConfigError("separation must be positive")
    rng = np.random.default_rng(seed)
    num_classes = num_tasks * classes_per_task
    means = _spread_means(rng, num_classes, dim, float(separation))

    def class_counts(total):
        base, rem = divmod(total, classes_per_task)
        return [base + (1 if j < rem else 0) for j in range(classes_per_task)]

    tasks = []
    for t in range(1, num_tasks + 1):
        class_ids = [(t - 1) * classes_per_task + j + 1 for j in range(classes_per_task)]
        xs, ys = [], []
        for split_counts in (class_counts(n_train), class_counts(n_test)):
            bx, by = [], []
            for cid, cnt in zip(class_ids, split_counts):
                mean = means[cid - 1]
                bx.append(mean + rng.normal(size=(cnt, dim)))
                by.append(np.full(cnt, cid, dtype=np.int64))
            x = np.concatenate(bx)
            y = np.concatenate(by)
            order = rng.permutation(len(x))
            xs.append(x[order])
            ys.append(y[order])
        tasks.append(
            TaskDataset(
                task_id=t,
                train_x=xs[0],
                train_y=ys[0],
                test_x=xs[1],
                test_y=ys[1],
                class_ids=frozenset(class_ids),
            )
        )
    return TaskStream(tasks)


def read_digits_csv(path):
    """Parse header-free rows of ``label,pixel_0,...,pixel_{d-1}``.

    Pixels must lie in [0, 1]; malformed rows raise with their line number.
    """
    xs, ys = [], []
    width = None
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open digits file {path}: {exc}") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                label = int(row[0])
                pixels = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: unparsable row ({exc})") from exc
            if not pixels:
                raise ConfigError(f"{path}:{lineno}: row has no pixel columns")
            if width is None:
                width = len(pixels)
            elif len(pixels) != width:
                raise ConfigError(
                    f"{path}:{lineno}: expected {width} pixels, got {len(pixels)}"
                )
            if min(pixels) < 0.0 or max(pixels) > 1.0:
                raise ConfigError(f"{path}:{lineno}: pixel values must be in [0, 1]")
            ys.append(label)
            xs.append(pixels)
    if not xs:
        raise ConfigError(f"{path}: no data rows")
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)


def write_digits_csv(path, x: np.ndarray, y: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(y, x):
            writer.writerow([int(label)] + [format(v, ".17g") for v in row])


def make_split_digits(num_tasks: int, seed: int, path) -> TaskStream:
    """Split a digits-style CSV into ``num_tasks`` tasks over disjoint
    class groups (seed-deterministic class shuffle, per-class 80/20
    train/test split)."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    x, y = read_digits_csv(path)
    classes = sorted(set(int(c) for c in y))
    if len(classes) < num_tasks:
        raise ConfigError(f"{len(classes)} classes cannot fill {num_tasks} tasks")
    rng = np.random.default_rng(seed)
    shuffled = [classes[i] for i in rng.permutation(len(classes))]
    base, rem = divmod(len(classes), num_tasks)
    groups, pos = [], 0
    for t in range(num_tasks):
        size = base + (1 if t < rem else 0)
        groups.append(sorted(shuffled[pos : pos + size]))
        pos += size

    tasks = []
    for t, group in enumerate(groups, start=1):
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for cid in group:
            rows = np.flatnonzero(y == cid)
            rows = rows[rng.permutation(len(rows))]
            n_test = max(1, len(rows) // 5) if len(rows) > 1 else 0
            te, tr = rows[:n_test], rows[n_test:]
            tr_x.append(x[tr])
            tr_y.append(y[tr])
            te_x.append(x[te])
            te_y.append(y[te])
        tasks.append(
            TaskDataset(
                task_id=t,
                train_x=np.concatenate(tr_x),
                train_y=np.concatenate(tr_y),
                test_x=np.concatenate(te_x) if te_x else np.empty((0, x.shape[1])),
                test_y=np.concatenate(te_y) if te_y else np.empty(0, dtype=np.int64),
                class_ids=frozenset(group),
            )
        )
    return TaskStream(tasks)


def make_blob_digits(n_train, n_test, num_classes=10, dim=64, noise=0.25, label_noise=0.0, seed=0):
    """Synthetic digits-style data: per-class prototypes in [0,1]^dim with
    clipped Gaussian noise. ``label_noise`` resamples that fraction of
    labels uniformly (train and test alike), giving the task an
    irreducible error floor. Returns (train_x, train_y, test_x, test_y)."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.0, 1.0, size=(num_classes, dim))

    def draw(n):
        labels = rng.integers(0, num_classes, size=n)
        x = protos[labels] + rng.normal(0.0, noise, size=(n, dim))
        if label_noise > 0.0:
            flip = rng.random(n) < label_noise
            labels = np.where(flip, rng.integers(0, num_classes, size=n), labels)
        return np.clip(x, 0.0, 1.0), labels.astype(np.int64)

    tr_x, tr_y = draw(n_train)
    te_x, te_y = draw(n_test)
    return tr_x, tr_y, te_x, te_y


# ---------------------------------------------------------------------------
# evaluation


def masked_logits(logits: np.ndarray, setting: str, task_id, stream: TaskStream) -> np.ndarray:
    """Restrict logits to the task's classes under task-incremental
    evaluation; identity under class-incremental."""
    if setting not in SETTINGS:
        raise ConfigError(f"setting must be one of {SETTINGS}")
    logits = np.asarray(logits, dtype=np.float64)
    if setting == "class_incremental":
        return logits.copy()
    if task_id is None or not (1 <= int(task_id) <= stream.num_tasks):
        raise ConfigError(f"unknown task_id {task_id!r} for task-incremental evaluation")
    cols = [stream.class_to_index[c] for c in stream.tasks[int(task_id) - 1].class_ids]
    masked = np.full_like(logits, -np.inf)
    if logits.ndim == 1:
        masked[cols] = logits[cols]
    else:
        masked[:, cols] = logits[:, cols]
    return masked


def accuracy_percent(model, params, stream: TaskStream, task_id: int, setting: str) -> float:
    """Test accuracy (%) of one task; argmax ties resolve to the lowest
    class index."""
    task = stream.tasks[task_id - 1]
    logits = model.logits_np(params, task.test_x)
    logits = masked_logits(logits, setting, task_id, stream)
    pred_idx = np.argmax(logits, axis=1)
    true_idx = stream.labels_to_indices(task.test_y)
    return 100.0 * float(np.mean(pred_idx == true_idx))
