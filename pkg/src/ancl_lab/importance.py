"""Per-parameter importance estimation: diagonal empirical Fisher and
output-sensitivity (MAS), plus the running-mean accumulator used across
tasks.

Per-sample weight gradients of an MLP factor into outer products of layer
deltas and activations, so squared / absolute means are computed exactly
with matrix products instead of a per-sample loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tasks import TaskDataset

FISHER, MAS = "fisher", "mas"


@dataclass
class ImportanceMap:
    values: np.ndarray
    source: str
    tasks_covered: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise ValueError("importance values must be nonnegative")
        if self.source not in (FISHER, MAS):
            raise ValueError(f"unknown importance source {self.source!r}")


def _head_context(arch, ds: TaskDataset, num_classes):
    if arch.head_mode == "multi":
        return ds.task_id, ds.labels - ds.class_range[0], None
    return 0, ds.labels, num_classes


def _per_sample_mean(arch, w, X, head, g_logits, transform) -> np.ndarray:
    """Mean over samples of transform(per-sample gradient), flattened.

    transform is applied elementwise to deltas and activations; valid for
    square (x -> x**2) and abs because each per-sample layer gradient is the
    outer product delta_i (x) activation_i.
    """
    trace = nn.forward_batch(arch, w, X, head)
    trunk, heads = nn.unpack(arch, w)
    out = np.zeros(arch.param_count)
    o_trunk, o_heads = nn.unpack(arch, out)
    n = len(X)

    tg = transform(g_logits)
    feats_t = transform(trace.features)
    oW, ob = o_heads[head]
    oW[:] = tg.T @ feats_t / n
    ob[:] = tg.mean(axis=0)

    d_post = g_logits @ heads[head][0]
    for i in range(len(trunk) - 1, -1, -1):
        delta = d_post * (trace.pre[i] > 0.0)
        a_prev = trace.inputs if i == 0 else trace.post[i - 1]
        oW, ob = o_trunk[i]
        oW[:] = transform(delta).T @ transform(a_prev) / n
        ob[:] = transform(delta).mean(axis=0)
        if i > 0:
            d_post = delta @ trunk[i][0]
    return out


def fisher_diag(arch, w, ds: TaskDataset,
                num_classes: int | None = None) -> ImportanceMap:
    """Empirical Fisher: mean squared cross-entropy gradient at true labels."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    head, labels, limit = _head_context(arch, ds, num_classes)
    logits = nn.forward_batch(arch, w, ds.inputs, head).head_logits[head]
    c = logits.shape[1] if limit is None else limit
    g = np.zeros_like(logits)
    g[:, :c] = np.exp(logits[:, :c] - nn._logsumexp(logits[:, :c]))
    g[np.arange(len(labels)), labels] -= 1.0
    values = _per_sample_mean(arch, w, ds.inputs, head, g, np.square)
    return ImportanceMap(values, FISHER)


def mas_importance(arch, w, ds: TaskDataset,
                   num_classes: int | None = None) -> ImportanceMap:
    """Mean absolute gradient of the squared output norm over the dataset."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    head, _, limit = _head_context(arch, ds, num_classes)
    logits = nn.forward_batch(arch, w, ds.inputs, head).head_logits[head]
    g = np.zeros_like(logits)
    c = logits.shape[1] if limit is None else limit
    g[:, :c] = 2.0 * logits[:, :c]
    values = _per_sample_mean(arch, w, ds.inputs, head, g, np.abs)
    return ImportanceMap(values, MAS)


def accumulate(prev: ImportanceMap, new: ImportanceMap, t: int) -> ImportanceMap:
    """Running mean over tasks: ((t-1) * prev + new) / t."""
    if prev.source != new.source:
        raise ValueError(f"cannot mix {prev.source} with {new.source}")
    if prev.values.shape != new.values.shape:
        raise ValueError("importance maps have different lengths")
    if t < 2:
        raise ValueError("accumulation starts at the second task")
    values = ((t - 1) * prev.values + new.values) / t
    return ImportanceMap(values, prev.source, tasks_covered=t)
