"""Training loops for continual sequences.

One engine (fit) drives every phase: minibatch SGD with momentum and a
validation-plateau schedule that divides the learning rate by a fixed
factor after `patience` epochs without validation-loss improvement and
stops once the rate falls below a floor. run_sequence executes a full
task stream: the first task trains plainly; later tasks optionally train
an auxiliary network on the current task alone (initialized from the
previous solution), then train the main network against the composed
objective. analysis_regime trains the branch set used by the
stability-plasticity analyses, all starting from shared multitask weights.

Randomness: every phase draws its batch order from its own generator,
seeded by (seed, task, phase), so adding or removing the auxiliary phase
never perturbs the main phase's stream.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import importance as imp_mod
from . import nn, replay
from .checkpoint import CheckpointStore
from .losses import (DISTILL_METHODS, QUADRATIC_METHODS, LossSpec, Method,
                     Mode, total_loss)
from .tasks import (TaskDataset, TaskSequence, aac, concat_datasets,
                    empty_accuracy_matrix, evaluate)

_PHASE_MAIN, _PHASE_AUX = 0, 1
_PHASE_MULTI_PREV, _PHASE_CL, _PHASE_MULTI = 10, 12, 13
_PHASE_ANCL_BASE = 20


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    loss: LossSpec
    lr: float = 0.1
    lr_decay: float = 3.0
    patience: int = 5
    min_lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = 0
    replay_m: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_decay <= 1:
            raise ValueError("lr_decay must exceed 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("bad batch_size / max_epochs")


@dataclass
class TrainHistory:
    val_losses: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.val_losses)


@dataclass
class RunRecord:
    accuracy_matrix: np.ndarray
    phase_accuracies: list[float]
    final_losses: list[float]
    val_history: list[TrainHistory]
    config_hash: str

    @property
    def aac(self) -> float:
        return aac(self.accuracy_matrix)


@dataclass
class StabilityReport:
    offending: np.ndarray
    max_combined: float
    n_params: int

    @property
    def ok(self) -> bool:
        return len(self.offending) == 0

    def summary(self) -> str:
        if self.ok:
            return (f"stable: max effective coefficient "
                    f"{self.max_combined:.4g} over {self.n_params} parameters")
        return (f"{len(self.offending)} / {self.n_params} parameters violate "
                f"the stable-update condition (max effective coefficient "
                f"{self.max_combined:.4g} > 1)")


def _phase_rng(seed: int, task_id: int, phase: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, task_id, phase]))


def fit(arch, w0, loss_fn, train_ds: TaskDataset, val_ds: TaskDataset,
        config: TrainConfig, rng: np.random.Generator,
        eval_fn=None, on_epoch=None):
    """Minibatch SGD with momentum under the plateau schedule.

    loss_fn(w, ds) must return (loss, grad). Returns (weights, history);
    if the learning rate already sits below the floor, w0 is returned
    untouched after zero epochs.
    """
    w = np.array(w0, dtype=np.float64)
    lr = config.lr
    state = nn.OptimState(np.zeros_like(w), lr, config.momentum)
    history = TrainHistory()
    best_val = np.inf
    stall = 0
    n = len(train_ds)
    for epoch in range(config.max_epochs):
        if lr < config.min_lr:
            break
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = train_ds.subset(order[start:start + config.batch_size])
            loss, grad = loss_fn(w, batch)
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (loss={loss})")
            w, state = nn.sgd_step(w, grad, state)
        val_loss = float(loss_fn(w, val_ds)[0])
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.val_losses.append(val_loss)
        history.lrs.append(lr)
        if eval_fn is not None:
            history.val_accuracies.append(float(eval_fn(w)))
        if on_epoch is not None:
            on_epoch(epoch, w)
        if val_loss < best_val:
            best_val = val_loss
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                lr = lr / config.lr_decay
                state = nn.OptimState(state.velocity, lr, config.momentum)
                stall = 0
    return w, history


def _head_span(arch, ds: TaskDataset) -> list[int]:
    """Heads whose class ranges intersect the dataset's (multi-head only)."""
    bounds = np.cumsum((0,) + arch.head_sizes)
    lo, hi = ds.class_range
    return [h for h in range(arch.n_heads)
            if bounds[h] <= hi and lo < bounds[h + 1]]


def grouped_ce_loss_grad(arch, w, ds: TaskDataset):
    """Mean cross-entropy over a batch mixing several tasks' classes.

    Multi-head networks route each sample through the head owning its
    label; the single head trains over all classes seen in the batch.
    """
    if arch.head_mode == "single":
        return total_loss(LossSpec(Method.LWF, Mode.FINETUNE), arch, w, ds,
                          CheckpointStore())
    bounds = np.cumsum((0,) + arch.head_sizes)
    trace = nn.forward_batch(arch, w, ds.inputs)
    n = len(ds)
    loss = 0.0
    logit_grads: dict[int, np.ndarray] = {}
    for h in _head_span(arch, ds):
        rows = (ds.labels >= bounds[h]) & (ds.labels < bounds[h + 1])
        if not rows.any():
            continue
        logits = trace.head_logits[h][rows]
        labels = ds.labels[rows] - bounds[h]
        logp = logits - nn._logsumexp(logits)
        loss += float(-logp[np.arange(len(labels)), labels].sum()) / n
        g = np.exp(logp)
        g[np.arange(len(labels)), labels] -= 1.0
        gh = np.zeros_like(trace.head_logits[h])
        gh[rows] = g / n
        logit_grads[h] = gh
    return loss, nn.backprop_logit_grads(arch, w, trace, logit_grads)


def _plain_loss_fn(arch):
    def fn(w, ds):
        return grouped_ce_loss_grad(arch, w, ds)
    return fn


def grouped_accuracy(arch, w, ds: TaskDataset) -> float:
    """Accuracy on a batch that may mix tasks: each sample scores through
    the head owning its label (single head: over all classes in range)."""
    if arch.head_mode == "single":
        return evaluate(arch, w, ds, num_classes=ds.class_range[1] + 1)
    bounds = np.cumsum((0,) + arch.head_sizes)
    trace = nn.forward_batch(arch, w, ds.inputs)
    correct = 0
    for h in _head_span(arch, ds):
        rows = (ds.labels >= bounds[h]) & (ds.labels < bounds[h + 1])
        if not rows.any():
            continue
        pred = np.argmax(trace.head_logits[h][rows], axis=1)
        correct += int((pred == ds.labels[rows] - bounds[h]).sum())
    return correct / len(ds)


def _eval_fn(arch, ds: TaskDataset, num_classes=None):
    def fn(w):
        return evaluate(arch, w, ds, num_classes=num_classes)
    return fn


def train_plain(arch, w_init, train_ds: TaskDataset, val_ds: TaskDataset,
                config: TrainConfig, rng=None, on_epoch=None):
    """Task-specific (cross-entropy only) training; handles batches that
    span several heads, so it also trains joint/multitask references."""
    if rng is None:
        rng = _phase_rng(config.seed, train_ds.task_id, _PHASE_MAIN)
    return fit(arch, w_init, _plain_loss_fn(arch), train_ds, val_ds, config,
               rng, eval_fn=lambda w: grouped_accuracy(arch, w, val_ds),
               on_epoch=on_epoch)


def stability_guard(eta, lam, lam_a, imp_old, imp_aux=None) -> StabilityReport:
    """Check 0 <= 1 - eta (lam F_old + lam_a F_aux) < 1 per parameter.

    Unregularized coordinates (zero combined importance) follow plain SGD
    and are exempt. Reported, never raised: the sufficient condition being
    violated does not guarantee divergence.
    """
    old_vals = imp_old.values if hasattr(imp_old, "values") else np.asarray(imp_old)
    combined = eta * lam * old_vals
    if imp_aux is not None:
        aux_vals = imp_aux.values if hasattr(imp_aux, "values") else np.asarray(imp_aux)
        combined = combined + eta * lam_a * aux_vals
    offending = np.flatnonzero(combined > 1.0)
    return StabilityReport(offending=offending,
                           max_combined=float(combined.max(initial=0.0)),
                           n_params=len(combined))


def _task_importance(arch, w, ds: TaskDataset, method: Method,
                     num_classes=None) -> imp_mod.ImportanceMap:
    if method == Method.EWC:
        return imp_mod.fisher_diag(arch, w, ds, num_classes=num_classes)
    return imp_mod.mas_importance(arch, w, ds, num_classes=num_classes)


def config_fingerprint(config: TrainConfig, extra: dict | None = None) -> str:
    payload = {
        "loss": {"method": config.loss.method.value,
                 "mode": config.loss.mode.value,
                 "lam": config.loss.lam, "lam_a": config.loss.lam_a,
                 "tau": config.loss.tau},
        "lr": config.lr, "lr_decay": config.lr_decay,
        "patience": config.patience, "min_lr": config.min_lr,
        "momentum": config.momentum, "batch_size": config.batch_size,
        "max_epochs": config.max_epochs, "seed": config.seed,
        "replay_m": config.replay_m,
    }
    if extra:
        payload["extra"] = extra
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def run_sequence(arch, sequence: TaskSequence, config: TrainConfig,
                 eval_split: str = "test", trace_hook=None):
    """Execute the full continual stream and collect the accuracy matrix.

    Task 0 always trains plainly. Later tasks: auxiliary mode first clones
    the previous solution, trains it on the current task alone, freezes it
    (computing its importance for the quadratic methods), then the main
    network trains under the composed objective. The finished solution is
    frozen as the next task's reference. trace_hook(task, phase, epoch, w)
    observes every epoch when given.
    """
    T = sequence.n_tasks
    spec = config.loss
    single = arch.head_mode == "single"
    store = CheckpointStore()
    if spec.method == Method.ICARL and config.replay_m:
        store.buffer = replay.MemoryBuffer(config.replay_m)
    w = nn.init_weights(arch, config.seed)
    A = empty_accuracy_matrix(T)
    record = RunRecord(A, [], [], [], config_fingerprint(config))

    for t, triple in enumerate(sequence.tasks):
        train_ds, val_ds = triple.train, triple.val
        seen = sequence.classes_seen(t)
        spec_t = spec if t > 0 else LossSpec(spec.method, Mode.FINETUNE,
                                             tau=spec.tau)

        if t > 0 and spec.mode == Mode.ANCL:
            aux_rng = _phase_rng(config.seed, t, _PHASE_AUX)
            hook = (lambda e, wv: trace_hook(t, "aux", e, wv)) if trace_hook else None
            w_aux, _ = fit(arch, store.require_old().copy(), _plain_loss_fn(arch),
                           train_ds, val_ds, config, aux_rng,
                           eval_fn=_eval_fn(arch, val_ds), on_epoch=hook)
            store.freeze_aux(w_aux)
            if spec.method in QUADRATIC_METHODS:
                store.aux_importance = _task_importance(
                    arch, w_aux, train_ds, spec.method,
                    num_classes=seen if single else None)

        if t > 0 and spec_t.mode != Mode.FINETUNE and \
                spec.method in QUADRATIC_METHODS and spec_t.lam > 0:
            guard = stability_guard(
                config.lr, spec_t.lam,
                spec_t.lam_a if spec_t.mode == Mode.ANCL else 0.0,
                store.require_old_importance(),
                store.aux_importance if spec_t.mode == Mode.ANCL else None)
            if not guard.ok:
                warnings.warn(guard.summary())

        batch_train = train_ds
        if spec.method == Method.ICARL and store.buffer is not None \
                and len(store.buffer):
            batch_train = replay.combine(train_ds, store.buffer)

        main_rng = _phase_rng(config.seed, t, _PHASE_MAIN)
        hook = (lambda e, wv: trace_hook(t, "main", e, wv)) if trace_hook else None
        loss_fn = (lambda wv, ds: total_loss(spec_t, arch, wv, ds, store))
        w, hist = fit(arch, w, loss_fn, batch_train, val_ds, config, main_rng,
                      eval_fn=_eval_fn(arch, val_ds,
                                       num_classes=seen if single else None),
                      on_epoch=hook)
        record.val_history.append(hist)
        record.final_losses.append(float(loss_fn(w, batch_train)[0]))

        store.freeze_old(w, t)
        if spec.method in QUADRATIC_METHODS:
            imp_t = _task_importance(arch, w, train_ds, spec.method,
                                     num_classes=seen if single else None)
            store.old_importance = imp_t if t == 0 else imp_mod.accumulate(
                store.old_importance, imp_t, t + 1)
        if spec.method == Method.ICARL and store.buffer is not None:
            replay.build_buffer_for_task(store.buffer, arch, w, train_ds)

        sizes = []
        for k in range(t + 1):
            ds_k = sequence.tasks[k].get(eval_split)
            A[t, k] = evaluate(arch, w, ds_k,
                               num_classes=seen if single else None)
            sizes.append(len(ds_k))
        record.phase_accuracies.append(
            float(np.average(A[t, :t + 1], weights=sizes)))
    return record


ANALYSIS_LAM_A_FRACTIONS = (0.02, 0.05, 0.13, 0.3, 0.55, 0.9)


def stable_lam_a_cap(lr: float, lam: float, imp_old, imp_aux,
                     headroom: float = 0.95) -> float:
    """Largest auxiliary strength keeping every coordinate's effective
    update factor lr (lam f_old + lam_a f_aux) below headroom.

    Importance magnitudes vary by orders of magnitude between runs (a
    perfectly fitted network has nearly zero curvature), so auxiliary-grid
    values only make sense relative to this cap.
    """
    f_old = imp_old.values if hasattr(imp_old, "values") else np.asarray(imp_old)
    f_aux = imp_aux.values if hasattr(imp_aux, "values") else np.asarray(imp_aux)
    mask = f_aux > 0
    if not mask.any():
        raise ValueError("auxiliary importance is identically zero; "
                         "no stable grid exists")
    room = (headroom / lr - lam * f_old[mask]) / f_aux[mask]
    cap = float(room.min())
    if cap <= 0:
        raise ValueError("lam already saturates the stable band; "
                         "reduce lam or the learning rate")
    return cap


@dataclass
class AnalysisBundle:
    """Weight sets produced by the shared-initialization analysis regime."""

    method: Method
    lam: float
    lam_a_grid: list[float]
    task_index: int
    seed: int
    w_old: np.ndarray
    w_aux: np.ndarray
    w_cl: np.ndarray
    w_ancl: dict[float, np.ndarray]
    w_multi: np.ndarray
    old_importance: imp_mod.ImportanceMap | None = None
    aux_importance: imp_mod.ImportanceMap | None = None


def analysis_regime(arch, sequence: TaskSequence, t: int, config: TrainConfig,
                    lam_a_grid) -> AnalysisBundle:
    """Train every branch the trade-off analyses compare, all initialized
    from multitask weights on tasks 0..t-1 (which also act as the old
    network): the current-task-only branch, the regularized branch, the
    doubly regularized branches over the lam_a grid, and the multitask
    reference on tasks 0..t.

    lam_a_grid is a list of strengths, or the string "auto" (quadratic
    methods only) for six points spread over the stable band implied by
    the importance maps and learning rate.
    """
    if t < 1:
        raise ValueError("the analysis regime needs a previous task (t >= 1)")
    auto_grid = isinstance(lam_a_grid, str)
    if auto_grid:
        if lam_a_grid != "auto":
            raise ValueError(f"unknown grid spec {lam_a_grid!r}")
        if config.loss.method not in QUADRATIC_METHODS:
            raise ValueError("auto grids need importance maps "
                             "(quadratic methods only)")
    spec = config.loss
    seed = config.seed
    single = arch.head_mode == "single"
    seen = sequence.classes_seen(t)
    prev_train = concat_datasets([tr.train for tr in sequence.tasks[:t]])
    prev_val = concat_datasets([tr.val for tr in sequence.tasks[:t]])
    cur = sequence.tasks[t]

    w_init = nn.init_weights(arch, seed)
    w_old, _ = train_plain(arch, w_init, prev_train, prev_val, config,
                           rng=_phase_rng(seed, t, _PHASE_MULTI_PREV))

    old_imp = aux_imp = None
    if spec.method in QUADRATIC_METHODS:
        prev_seen = sequence.classes_seen(t - 1)
        maps = [_task_importance(arch, w_old, tr.train, spec.method,
                                 num_classes=prev_seen if single else None)
                for tr in sequence.tasks[:t]]
        old_imp = maps[0]
        for j, m in enumerate(maps[1:], start=2):
            old_imp = imp_mod.accumulate(old_imp, m, j)

    w_aux, _ = train_plain(arch, w_old.copy(), cur.train, cur.val, config,
                           rng=_phase_rng(seed, t, _PHASE_AUX))
    if spec.method in QUADRATIC_METHODS:
        aux_imp = _task_importance(arch, w_aux, cur.train, spec.method,
                                   num_classes=seen if single else None)
    if auto_grid:
        cap = stable_lam_a_cap(config.lr, spec.lam, old_imp, aux_imp)
        lam_a_grid = [cap * f for f in ANALYSIS_LAM_A_FRACTIONS]

    store = CheckpointStore()
    store.freeze_old(w_old, t - 1)
    store.freeze_aux(w_aux)
    store.old_importance = old_imp
    store.aux_importance = aux_imp

    def _train_branch(branch_spec: LossSpec, phase: int):
        loss_fn = (lambda wv, ds: total_loss(branch_spec, arch, wv, ds, store))
        w, _ = fit(arch, w_old.copy(), loss_fn, cur.train, cur.val, config,
                   _phase_rng(seed, t, phase),
                   eval_fn=_eval_fn(arch, cur.val,
                                    num_classes=seen if single else None))
        return w

    w_cl = _train_branch(LossSpec(spec.method, Mode.CL, lam=spec.lam,
                                  tau=spec.tau), _PHASE_CL)
    w_ancl = {}
    for i, lam_a in enumerate(lam_a_grid):
        branch = LossSpec(spec.method, Mode.ANCL, lam=spec.lam,
                          lam_a=float(lam_a), tau=spec.tau)
        w_ancl[float(lam_a)] = _train_branch(branch, _PHASE_ANCL_BASE + i)

    all_train = concat_datasets([tr.train for tr in sequence.tasks[:t + 1]])
    all_val = concat_datasets([tr.val for tr in sequence.tasks[:t + 1]])
    w_multi, _ = train_plain(arch, w_old.copy(), all_train, all_val, config,
                             rng=_phase_rng(seed, t, _PHASE_MULTI))

    return AnalysisBundle(method=spec.method, lam=spec.lam,
                          lam_a_grid=[float(v) for v in lam_a_grid],
                          task_index=t, seed=seed, w_old=w_old, w_aux=w_aux,
                          w_cl=w_cl, w_ancl=w_ancl, w_multi=w_multi,
                          old_importance=old_imp, aux_importance=aux_imp)


def save_bundle(path: str, arch, bundle: AnalysisBundle):
    """Persist an analysis bundle in the checkpoint container format."""
    from .checkpoint import save_checkpoint
    weights = {"old": bundle.w_old, "aux": bundle.w_aux,
               "cl": bundle.w_cl, "multi": bundle.w_multi}
    for i, lam_a in enumerate(bundle.lam_a_grid):
        weights[f"ancl_{i}"] = bundle.w_ancl[lam_a]
    importances = {}
    if bundle.old_importance is not None:
        importances["old"] = bundle.old_importance
    if bundle.aux_importance is not None:
        importances["aux"] = bundle.aux_importance
    save_checkpoint(path, arch, weights, importances, extra={
        "kind": "analysis-bundle",
        "method": bundle.method.value,
        "lam": bundle.lam,
        "lam_a_grid": bundle.lam_a_grid,
        "task_index": bundle.task_index,
        "seed": bundle.seed,
    })


def load_bundle(path: str) -> tuple:
    """Load (arch, AnalysisBundle) back from a container file."""
    from .checkpoint import load_checkpoint
    ck = load_checkpoint(path)
    if ck.extra.get("kind") != "analysis-bundle":
        raise ValueError(f"{path} does not hold an analysis bundle")
    grid = [float(v) for v in ck.extra["lam_a_grid"]]
    bundle = AnalysisBundle(
        method=Method(ck.extra["method"]),
        lam=float(ck.extra["lam"]),
        lam_a_grid=grid,
        task_index=int(ck.extra["task_index"]),
        seed=int(ck.extra["seed"]),
        w_old=ck.weights["old"],
        w_aux=ck.weights["aux"],
        w_cl=ck.weights["cl"],
        w_ancl={lam_a: ck.weights[f"ancl_{i}"] for i, lam_a in enumerate(grid)},
        w_multi=ck.weights["multi"],
        old_importance=ck.importances.get("old"),
        aux_importance=ck.importances.get("aux"),
    )
    return ck.arch, bundle


def train_joint(arch, sequence: TaskSequence, config: TrainConfig):
    """Multitask baseline: one run over every task's data at once."""
    train = concat_datasets([tr.train for tr in sequence.tasks])
    val = concat_datasets([tr.val for tr in sequence.tasks])
    w0 = nn.init_weights(arch, config.seed)
    w, _ = train_plain(arch, w0, train, val, config,
                       rng=_phase_rng(config.seed, 0, _PHASE_MULTI))
    return w


@dataclass
class GridSearchResult:
    best_lam: float
    best_lam_a: float
    cl_scores: dict[float, float]
    ancl_scores: dict[float, float]


def grid_search(arch, sequences: dict[int, TaskSequence], config: TrainConfig,
                lam_grid, lam_a_grid, eval_split: str = "val") -> GridSearchResult:
    """Two-phase hyperparameter search scored by validation-set AAC.

    Phase one fixes lam with the plain regularized objective; phase two
    searches lam_a with the auxiliary objective at the chosen lam. Ties
    pick the smaller value.
    """
    if not len(lam_grid) or not len(lam_a_grid):
        raise ValueError("grids must be nonempty")
    method, tau = config.loss.method, config.loss.tau

    def _mean_aac(spec: LossSpec) -> float:
        scores = []
        for seed, seq in sequences.items():
            cfg = replace(config, loss=spec, seed=seed)
            try:
                scores.append(run_sequence(arch, seq, cfg,
                                           eval_split=eval_split).aac)
            except TrainingDivergedError:
                # unstable cell (see stability_guard); score it out
                return float("-inf")
        return float(np.mean(scores))

    cl_scores = {float(lam): _mean_aac(LossSpec(method, Mode.CL, lam=float(lam),
                                                tau=tau))
                 for lam in lam_grid}
    best_lam = max(sorted(cl_scores), key=lambda lam: (cl_scores[lam], -lam))

    ancl_scores = {}
    for lam_a in lam_a_grid:
        lam_a = float(lam_a)
        spec = (LossSpec(method, Mode.CL, lam=best_lam, tau=tau)
                if lam_a == 0.0 else
                LossSpec(method, Mode.ANCL, lam=best_lam, lam_a=lam_a, tau=tau))
        ancl_scores[lam_a] = _mean_aac(spec)
    best_lam_a = max(sorted(ancl_scores), key=lambda v: (ancl_scores[v], -v))
    return GridSearchResult(best_lam, best_lam_a, cl_scores, ancl_scores)
