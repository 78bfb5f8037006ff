"""Exemplar memory for replay-based methods: greedy herding selection,
nearest-mean-of-exemplars classification, and dataset combination.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tasks import TaskDataset, concat_datasets


class ShortClassWarning(UserWarning):
    """Fewer samples than requested exemplars; the whole class is kept."""


def herding_select(features: np.ndarray, m: int) -> np.ndarray:
    """Greedy pick of m indices keeping the running exemplar mean closest
    to the class feature mean.

    Step k chooses the candidate minimizing
    ||mu - (sum(selected) + candidate) / k||_2, ties going to the lowest
    index. Asking for more exemplars than exist keeps them all and warns.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise ValueError("features must be a nonempty (N, p) array")
    if m < 1:
        raise ValueError("m must be >= 1")
    n = len(F)
    if m > n:
        warnings.warn(f"requested {m} exemplars from {n} samples; keeping all",
                      ShortClassWarning)
        m = n
    mu = F.mean(axis=0)
    selected: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    for k in range(1, m + 1):
        dists = np.linalg.norm(mu - (running + F) / k, axis=1)
        dists[~available] = np.inf
        pick = int(np.argmin(dists))
        selected.append(pick)
        available[pick] = False
        running += F[pick]
    return np.array(selected)


def nme_classify(feature: np.ndarray, class_means: np.ndarray,
                 class_ids: np.ndarray | None = None) -> int:
    """Nearest class mean in Euclidean distance; ties -> lowest class id."""
    means = np.atleast_2d(np.asarray(class_means, dtype=np.float64))
    if len(means) == 0:
        raise ValueError("no class means given")
    ids = np.arange(len(means)) if class_ids is None else np.asarray(class_ids)
    order = np.argsort(ids, kind="stable")
    dists = np.linalg.norm(means[order] - np.asarray(feature), axis=1)
    return int(ids[order][np.argmin(dists)])


@dataclass
class MemoryBuffer:
    """Fixed per-class exemplar store (m exemplars per class)."""

    m: int
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)
    feature_cache: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.exemplars.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def add_class(self, class_id: int, inputs: np.ndarray,
                  features: np.ndarray | None = None):
        if class_id in self.exemplars:
            raise ValueError(f"class {class_id} already stored")
        self.exemplars[class_id] = np.array(inputs, dtype=np.float64)
        if features is not None:
            self.feature_cache[class_id] = np.array(features)

    def as_dataset(self, split: str = "train") -> TaskDataset:
        if not self.exemplars:
            raise ValueError("buffer is empty")
        X = np.concatenate([self.exemplars[c] for c in self.classes])
        y = np.concatenate([np.full(len(self.exemplars[c]), c)
                            for c in self.classes])
        return TaskDataset(X, y, (min(self.classes), max(self.classes)),
                           task_id=0, split=split)

    def class_means(self) -> tuple[np.ndarray, np.ndarray]:
        """(class ids, mean cached feature per class), for NME scoring."""
        ids = np.array(self.classes)
        means = np.stack([self.feature_cache[c].mean(axis=0) for c in ids])
        return ids, means


def extract_features(arch: nn.ArchSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Centered-normalized penultimate features, one row per sample."""
    raw = nn.forward_batch(arch, w, X).features
    return nn.center_normalize(raw)


def build_buffer_for_task(buffer: MemoryBuffer, arch, w,
                          ds: TaskDataset) -> MemoryBuffer:
    """Herd m exemplars per class of ds into the buffer (main-net features)."""
    for c in range(ds.class_range[0], ds.class_range[1] + 1):
        mask = ds.labels == c
        if not mask.any():
            continue
        X_c = ds.inputs[mask]
        feats = extract_features(arch, w, X_c)
        idx = herding_select(feats, min(buffer.m, len(X_c)))
        buffer.add_class(c, X_c[idx], feats[idx])
    return buffer


def combine(current: TaskDataset, buffer: MemoryBuffer) -> TaskDataset:
    """Current task data plus every stored exemplar, classes widened to
    [0, last current class]."""
    if len(buffer) == 0:
        return current
    mem = buffer.as_dataset(split=current.split)
    if mem.dim != current.dim:
        raise ValueError("buffer and dataset dimensions differ")
    merged = concat_datasets([current, mem], task_id=current.task_id,
                             split=current.split)
    merged.class_range = (0, current.class_range[1])
    return merged
