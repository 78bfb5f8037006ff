"""Synthetic continual-learning task streams and evaluation metrics.

Tasks are Gaussian blob classification problems sharing one input space,
so later tasks genuinely interfere with earlier ones. Datasets can also be
read from / written to CSV (header ``x0..x{d-1},label``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import nn

TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)


@dataclass
class TaskDataset:
    """Labeled inputs for one task; class_range is inclusive on both ends."""

    inputs: np.ndarray
    labels: np.ndarray
    class_range: tuple[int, int]
    task_id: int = 0
    split: str = TRAIN

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.labels) != len(self.inputs):
            raise ValueError("inputs must be (N, d) with matching labels")
        lo, hi = self.class_range
        if len(self.labels) and (self.labels.min() < lo or self.labels.max() > hi):
            raise ValueError("labels fall outside class_range")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "TaskDataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])


@dataclass
class TaskTriple:
    train: TaskDataset
    val: TaskDataset
    test: TaskDataset

    def get(self, split: str) -> TaskDataset:
        return getattr(self, split)


@dataclass
class TaskSequence:
    tasks: list[TaskTriple]
    classes_per_task: int

    def __post_init__(self):
        prev_hi = -1
        for tr in self.tasks:
            lo, hi = tr.train.class_range
            if lo != prev_hi + 1:
                raise ValueError("task class ranges must be disjoint and ordered")
            prev_hi = hi

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def total_classes(self) -> int:
        return self.tasks[-1].train.class_range[1] + 1

    def classes_seen(self, task_id: int) -> int:
        """Number of classes covered by tasks 0..task_id inclusive."""
        return self.tasks[task_id].train.class_range[1] + 1


def make_blob_sequence(n_tasks: int, classes_per_task: int, samples_per_class: int,
                       dim: int, spread: float = 0.25, seed: int = 0) -> TaskSequence:
    """Gaussian class clusters with seeded means and a 70/10/20 split.

    Class means are drawn fresh per seed from a standard normal over the
    shared input space, so sequential training on later tasks disturbs
    earlier decision regions.
    """
    if min(n_tasks, classes_per_task, samples_per_class, dim) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    n_train = round(0.7 * samples_per_class)
    n_val = round(0.1 * samples_per_class)
    tasks = []
    for t in range(n_tasks):
        first = t * classes_per_task
        per_split = {s: ([], []) for s in SPLITS}
        for c in range(classes_per_task):
            mean = rng.normal(0.0, 1.0, size=dim)
            pts = mean + spread * rng.normal(size=(samples_per_class, dim))
            cuts = {TRAIN: pts[:n_train],
                    VAL: pts[n_train:n_train + n_val],
                    TEST: pts[n_train + n_val:]}
            for s in SPLITS:
                per_split[s][0].append(cuts[s])
                per_split[s][1].append(np.full(len(cuts[s]), first + c))
        rng_order = {s: rng.permutation(sum(len(a) for a in per_split[s][0]))
                     for s in SPLITS}
        made = {}
        for s in SPLITS:
            X = np.concatenate(per_split[s][0])[rng_order[s]]
            y = np.concatenate(per_split[s][1])[rng_order[s]]
            made[s] = TaskDataset(X, y, (first, first + classes_per_task - 1),
                                  task_id=t, split=s)
        tasks.append(TaskTriple(made[TRAIN], made[VAL], made[TEST]))
    return TaskSequence(tasks, classes_per_task)


def concat_datasets(datasets: list[TaskDataset], task_id: int = 0,
                    split: str = TRAIN) -> TaskDataset:
    """Stack datasets; the class range widens to cover every input."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    dims = {d.dim for d in datasets}
    if len(dims) != 1:
        raise ValueError("input dimensions differ")
    X = np.concatenate([d.inputs for d in datasets])
    y = np.concatenate([d.labels for d in datasets])
    lo = min(d.class_range[0] for d in datasets)
    hi = max(d.class_range[1] for d in datasets)
    return TaskDataset(X, y, (lo, hi), task_id=task_id, split=split)


def evaluate(arch: nn.ArchSpec, w: np.ndarray, ds: TaskDataset,
             head: int | None = None, num_classes: int | None = None) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class.

    Multi-head networks score through the dataset's task head (labels are
    made head-local); the single head scores over global classes, optionally
    restricted to the first num_classes seen so far.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if arch.head_mode == "multi":
        h = ds.task_id if head is None else head
        logits = nn.forward_batch(arch, w, ds.inputs, h).logits
        target = ds.labels - ds.class_range[0]
    else:
        logits = nn.forward_batch(arch, w, ds.inputs, 0).logits
        if num_classes is not None:
            logits = logits[:, :num_classes]
        target = ds.labels
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == target))


def mean_ce_loss(arch: nn.ArchSpec, w: np.ndarray, ds: TaskDataset,
                 head: int | None = None, num_classes: int | None = None) -> float:
    """Mean softmax cross-entropy without gradients (for landscape scans)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if arch.head_mode == "multi":
        h = ds.task_id if head is None else head
        logits = nn.forward_batch(arch, w, ds.inputs, h).logits
        target = ds.labels - ds.class_range[0]
    else:
        logits = nn.forward_batch(arch, w, ds.inputs, 0).logits
        if num_classes is not None:
            logits = logits[:, :num_classes]
        target = ds.labels
    logp = logits - nn._logsumexp(logits)
    return float(-logp[np.arange(len(target)), target].mean())


def empty_accuracy_matrix(n_tasks: int) -> np.ndarray:
    """T x T matrix, A[j, k] = accuracy of task k after task j; NaN above."""
    return np.full((n_tasks, n_tasks), np.nan)


def aac(matrix: np.ndarray) -> float:
    """Average of the final row: accuracy on every task after the last one."""
    final = np.asarray(matrix)[-1]
    if np.isnan(final).any():
        raise ValueError("final row is incomplete")
    return float(final.mean())


def aiac(phase_accuracies) -> float:
    """Average of the per-phase accuracies on all classes seen so far."""
    phases = np.asarray(phase_accuracies, dtype=np.float64)
    if phases.size == 0 or np.isnan(phases).any():
        raise ValueError("phase accuracies are incomplete")
    return float(phases.mean())


def save_csv(ds: TaskDataset, path: str):
    header = ",".join([f"x{i}" for i in range(ds.dim)] + ["label"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row, label in zip(ds.inputs, ds.labels):
            fh.write(",".join(f"{v:.17g}" for v in row) + f",{label}\n")


def load_csv(path: str, task_id: int = 0, split: str = TRAIN,
             class_range: tuple[int, int] | None = None) -> TaskDataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[-1] != "label" or any(h != f"x{i}" for i, h in enumerate(header[:-1])):
            raise ValueError(f"{path}: unexpected CSV header")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    X = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows])
    if class_range is None:
        class_range = (int(y.min()), int(y.max()))
    return TaskDataset(X, y, class_range, task_id=task_id, split=split)


def save_sequence_csv(seq: TaskSequence, directory: str):
    os.makedirs(directory, exist_ok=True)
    for t, triple in enumerate(seq.tasks):
        for s in SPLITS:
            save_csv(triple.get(s), os.path.join(directory, f"task{t}_{s}.csv"))


def load_sequence_csv(directory: str, n_tasks: int,
                      classes_per_task: int) -> TaskSequence:
    tasks = []
    for t in range(n_tasks):
        lo = t * classes_per_task
        rng_pair = (lo, lo + classes_per_task - 1)
        parts = {}
        for s in SPLITS:
            path = os.path.join(directory, f"task{t}_{s}.csv")
            if not os.path.exists(path):
                raise FileNotFoundError(path)
            parts[s] = load_csv(path, task_id=t, split=s, class_range=rng_pair)
        tasks.append(TaskTriple(parts[TRAIN], parts[VAL], parts[TEST]))
    return TaskSequence(tasks, classes_per_task)
