"""Composition of the continual-learning objectives.

A task objective is the task cross-entropy plus zero, one, or two
regularizers toward frozen reference networks: one toward the previous
continual solution (strength lam) and, in auxiliary mode, one toward a
network trained only on the current task (strength lam_a). Each method
contributes its own regularizer shape:

    ewc / mas   (lam/2) * sum_i imp_i (w_i - ref_i)^2
    lwf / icarl lam * mean_j sum_c -y_t^c log y_m^c   (temperature softmax)
    lfl         lam * mean_j ||f_m - f_ref||^2        (centered-normalized
                                                       penultimate features)

Gradients are exact sums of the component gradients, backpropagated
through the network by hand. Terms with zero strength are skipped
entirely, so dropping a regularizer reproduces the smaller objective
bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import CheckpointStore
from .importance import FISHER, MAS, ImportanceMap
from .tasks import TaskDataset


class Method(enum.Enum):
    EWC = "ewc"
    MAS = "mas"
    LWF = "lwf"
    LFL = "lfl"
    ICARL = "icarl"


class Mode(enum.Enum):
    FINETUNE = "finetune"
    CL = "cl"
    ANCL = "ancl"


QUADRATIC_METHODS = (Method.EWC, Method.MAS)
DISTILL_METHODS = (Method.LWF, Method.ICARL)
_IMPORTANCE_SOURCE = {Method.EWC: FISHER, Method.MAS: MAS}


@dataclass(frozen=True)
class LossSpec:
    method: Method
    mode: Mode
    lam: float = 0.0
    lam_a: float = 0.0
    tau: float = 2.0

    def __post_init__(self):
        if self.lam < 0 or self.lam_a < 0:
            raise ValueError("regularization strengths must be nonnegative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.mode == Mode.FINETUNE and (self.lam or self.lam_a):
            raise ValueError("fine-tuning takes lam = lam_a = 0")
        if self.mode == Mode.CL and self.lam_a:
            raise ValueError("plain continual mode takes lam_a = 0")


def quad_penalty(w: np.ndarray, w_ref: np.ndarray, imp, lam: float):
    """(lam/2) sum_i imp_i (w_i - ref_i)^2 and its gradient in w."""
    values = imp.values if isinstance(imp, ImportanceMap) else np.asarray(imp)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if not (w.shape == w_ref.shape == values.shape):
        raise ValueError("weights, reference, and importance lengths differ")
    diff = w - w_ref
    loss = 0.5 * lam * float(np.sum(values * diff * diff))
    return loss, lam * values * diff


def lwf_kd(main_logits: np.ndarray, teacher_logits: np.ndarray,
           tau: float, weight: float):
    """Distillation loss against temperature-scaled teacher targets.

    Returns the loss and its gradient at the main logits,
    (weight / tau) (y_main - y_teacher), averaged over the batch when the
    inputs are two-dimensional.
    """
    main = np.asarray(main_logits, dtype=np.float64)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if main.shape != teacher.shape:
        raise ValueError("main and teacher logits have different shapes")
    squeeze = main.ndim == 1
    if squeeze:
        main, teacher = main[None, :], teacher[None, :]
    n = len(main)
    y_teacher = nn.softmax_temp(teacher, tau)
    scaled = main / tau
    log_y_main = scaled - nn._logsumexp(scaled)
    loss = weight * float(-(y_teacher * log_y_main).sum(axis=1).mean())
    grad = (weight / tau) * (np.exp(log_y_main) - y_teacher) / n
    return loss, (grad[0] if squeeze else grad)


def lfl_penalty(f_main: np.ndarray, f_ref: np.ndarray, weight: float):
    """Squared distance between feature vectors and its gradient in f_main.

    Batch inputs average the per-sample squared distances.
    """
    a = np.asarray(f_main, dtype=np.float64)
    b = np.asarray(f_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("feature shapes differ")
    squeeze = a.ndim == 1
    if squeeze:
        a, b = a[None, :], b[None, :]
    diff = a - b
    loss = weight * float((diff * diff).sum(axis=1).mean())
    grad = 2.0 * weight * diff / len(a)
    return loss, (grad[0] if squeeze else grad)


def _seen_logits(trace: nn.ForwardTrace, arch: nn.ArchSpec, task_id: int,
                 classes_seen: int) -> np.ndarray:
    if arch.head_mode == "multi":
        return np.concatenate(trace.head_logits[:task_id + 1], axis=1)
    return trace.head_logits[0][:, :classes_seen]


def _scatter_seen_grad(g: np.ndarray, arch: nn.ArchSpec, task_id: int,
                       logit_grads: dict[int, np.ndarray],
                       template: list[np.ndarray]):
    """Accumulate a gradient over the seen-classes logits into per-head slots."""
    if arch.head_mode == "multi":
        off = 0
        for h in range(task_id + 1):
            width = arch.head_sizes[h]
            if h not in logit_grads:
                logit_grads[h] = np.zeros_like(template[h])
            logit_grads[h] += g[:, off:off + width]
            off += width
    else:
        if 0 not in logit_grads:
            logit_grads[0] = np.zeros_like(template[0])
        logit_grads[0][:, :g.shape[1]] += g


def _require_source(imp: ImportanceMap, method: Method):
    want = _IMPORTANCE_SOURCE[method]
    if imp.source != want:
        raise ValueError(f"{method.value} needs a {want} importance map, "
                         f"got {imp.source}")
    return imp


def total_loss(spec: LossSpec, arch: nn.ArchSpec, w: np.ndarray,
               batch: TaskDataset, store: CheckpointStore):
    """Full objective value and exact weight gradient on one batch.

    The batch supplies the task context: its task_id selects the head in
    multi-head mode and its class_range bounds the classes in play. For
    replay methods the caller passes the combined current + exemplar batch.
    """
    if spec.method == Method.ICARL and arch.head_mode == "multi":
        raise ValueError("replay distillation expects a single-head network")
    task_id = batch.task_id
    classes_seen = batch.class_range[1] + 1
    use_old = spec.mode != Mode.FINETUNE and spec.lam > 0
    use_aux = spec.mode == Mode.ANCL and spec.lam_a > 0

    trace = nn.forward_batch(arch, w, batch.inputs)
    if arch.head_mode == "multi":
        head = task_id
        labels = batch.labels - batch.class_range[0]
        ce_limit = None
    else:
        head = 0
        labels = batch.labels
        ce_limit = classes_seen
    ce_loss, g_ce = nn.ce_from_logits(trace.head_logits[head], labels, ce_limit)

    loss = ce_loss
    logit_grads: dict[int, np.ndarray] = {head: g_ce}
    extra_grad = np.zeros(arch.param_count)

    if spec.method in QUADRATIC_METHODS:
        if use_old:
            l, g = quad_penalty(w, store.require_old(),
                                _require_source(store.require_old_importance(),
                                                spec.method), spec.lam)
            loss += l
            extra_grad += g
        if use_aux:
            l, g = quad_penalty(w, store.require_aux(),
                                _require_source(store.require_aux_importance(),
                                                spec.method), spec.lam_a)
            loss += l
            extra_grad += g
    elif spec.method in DISTILL_METHODS:
        main_seen = _seen_logits(trace, arch, task_id, classes_seen)
        for enabled, weights_of, strength in (
                (use_old, store.require_old, spec.lam),
                (use_aux, store.require_aux, spec.lam_a)):
            if not enabled:
                continue
            t_trace = nn.forward_batch(arch, weights_of(), batch.inputs)
            t_seen = _seen_logits(t_trace, arch, task_id, classes_seen)
            l, g = lwf_kd(main_seen, t_seen, spec.tau, strength)
            loss += l
            _scatter_seen_grad(g, arch, task_id, logit_grads, trace.head_logits)
    elif spec.method == Method.LFL:
        if use_old or use_aux:
            f_main = nn.center_normalize(trace.features)
            d_norm = np.zeros_like(f_main)
            for enabled, weights_of, strength in (
                    (use_old, store.require_old, spec.lam),
                    (use_aux, store.require_aux, spec.lam_a)):
                if not enabled:
                    continue
                f_ref = nn.center_normalize(
                    nn.forward_batch(arch, weights_of(), batch.inputs).features)
                l, g = lfl_penalty(f_main, f_ref, strength)
                loss += l
                d_norm += g
            d_raw = nn.center_normalize_vjp(trace.features, d_norm)
            extra_grad += nn.backprop_feature_grads(arch, w, trace, d_raw)
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unhandled method {spec.method}")

    grad = nn.backprop_logit_grads(arch, w, trace, logit_grads)
    if use_old or use_aux:
        grad = grad + extra_grad
    return loss, grad
