"""Minimal feed-forward network core: deterministic init, forward traces,
manual backprop, and SGD-with-momentum updates.

All weights live in a single flat float64 vector ("weight vector") whose
layout is fixed by the architecture: for each layer in order (trunk layers
first, then one linear head per task), the weight matrix W of shape
(out, in) flattened row-major, followed by the bias vector of length out.
Everything here is pure: functions take weights and return new arrays.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

ALL_HEADS = "all"


class DegenerateFeatureWarning(UserWarning):
    """Raised when a feature vector is constant and cannot be normalized."""


@dataclass(frozen=True)
class ArchSpec:
    """Shape of an MLP: trunk of ReLU hidden layers plus linear heads.

    head_mode "multi" keeps one head per task (head_sizes lists the class
    count of each task); "single" keeps exactly one head covering all
    classes (head_sizes has one entry).
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    head_sizes: tuple[int, ...]
    head_mode: str = "multi"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if not self.head_sizes or any(c < 1 for c in self.head_sizes):
            raise ValueError("head_sizes must be nonempty positive")
        if self.head_mode not in ("multi", "single"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.head_mode == "single" and len(self.head_sizes) != 1:
            raise ValueError("single-head arch takes exactly one head size")

    @property
    def n_heads(self) -> int:
        return len(self.head_sizes)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) of every linear layer, trunk first, then heads."""
        dims = [self.input_dim, *self.hidden_dims]
        shapes = [(dims[i + 1], dims[i]) for i in range(len(self.hidden_dims))]
        shapes += [(c, self.feature_dim) for c in self.head_sizes]
        return shapes

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


@dataclass
class ForwardTrace:
    """Per-layer record of one forward pass (single sample or batch)."""

    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    features: np.ndarray
    head_logits: list[np.ndarray]
    head: int | str

    @property
    def logits(self) -> np.ndarray:
        if self.head == ALL_HEADS:
            return np.concatenate(self.head_logits, axis=-1)
        return self.head_logits[self.head]


@dataclass
class OptimState:
    """SGD-with-momentum state; velocity has one entry per parameter."""

    velocity: np.ndarray
    lr: float
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def _layer_slices(arch: ArchSpec):
    slices = []
    off = 0
    for out, inp in arch.layer_shapes():
        w_sl = slice(off, off + out * inp)
        b_sl = slice(off + out * inp, off + out * inp + out)
        slices.append((w_sl, b_sl, out, inp))
        off = b_sl.stop
    return slices


def unpack(arch: ArchSpec, w: np.ndarray):
    """Split a flat weight vector into per-layer (W, b) views (no copies)."""
    if w.shape != (arch.param_count,):
        raise ValueError(
            f"weight vector has shape {w.shape}, arch needs ({arch.param_count},)"
        )
    layers = [
        (w[w_sl].reshape(out, inp), w[b_sl])
        for w_sl, b_sl, out, inp in _layer_slices(arch)
    ]
    n_trunk = len(arch.hidden_dims)
    return layers[:n_trunk], layers[n_trunk:]


def init_weights(arch: ArchSpec, seed: int) -> np.ndarray:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    rng = np.random.default_rng(seed)
    w = np.empty(arch.param_count, dtype=np.float64)
    for w_sl, b_sl, out, inp in _layer_slices(arch):
        bound = 1.0 / np.sqrt(inp)
        w[w_sl] = rng.uniform(-bound, bound, size=out * inp)
        w[b_sl] = rng.uniform(-bound, bound, size=out)
    return w


def forward_batch(arch: ArchSpec, w: np.ndarray, X: np.ndarray,
                  head: int | str = ALL_HEADS) -> ForwardTrace:
    """Forward pass over a batch X of shape (N, input_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"inputs must be (N, {arch.input_dim}), got {X.shape}")
    _check_head(arch, head)
    trunk, heads = unpack(arch, w)
    pre, post = [], []
    a = X
    for W, b in trunk:
        z = a @ W.T + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        post.append(a)
    head_logits = [a @ W.T + b for W, b in heads]
    return ForwardTrace(inputs=X, pre=pre, post=post, features=a,
                        head_logits=head_logits, head=head)


def forward(arch: ArchSpec, w: np.ndarray, x: np.ndarray,
            head: int | str = ALL_HEADS) -> ForwardTrace:
    """Forward pass for a single input vector of length input_dim."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes a single input vector; use forward_batch")
    t = forward_batch(arch, w, x[None, :], head)
    return ForwardTrace(
        inputs=x,
        pre=[z[0] for z in t.pre],
        post=[a[0] for a in t.post],
        features=t.features[0],
        head_logits=[o[0] for o in t.head_logits],
        head=head,
    )


def _check_head(arch: ArchSpec, head: int | str):
    if head == ALL_HEADS:
        return
    if not isinstance(head, (int, np.integer)):
        raise ValueError(f"head must be an index or ALL_HEADS, got {head!r}")
    if not 0 <= head < arch.n_heads:
        raise ValueError(f"head index {head} out of range for {arch.n_heads} heads")


def _as_batch(trace: ForwardTrace) -> ForwardTrace:
    if trace.inputs.ndim == 2:
        return trace
    return ForwardTrace(
        inputs=trace.inputs[None, :],
        pre=[z[None, :] for z in trace.pre],
        post=[a[None, :] for a in trace.post],
        features=trace.features[None, :],
        head_logits=[o[None, :] for o in trace.head_logits],
        head=trace.head,
    )


def backprop_logit_grads(arch: ArchSpec, w: np.ndarray, trace: ForwardTrace,
                         logit_grads: dict[int, np.ndarray]) -> np.ndarray:
    """Chain gradients given at head logits back to the flat weight vector.

    logit_grads maps head index -> (N, head_size) array holding dL/dlogits
    under whatever reduction the caller uses. Heads absent from the mapping
    contribute nothing.
    """
    trace = _as_batch(trace)
    trunk, heads = unpack(arch, w)
    grad = np.zeros(arch.param_count, dtype=np.float64)
    g_trunk, g_heads = unpack(arch, grad)

    d_feat = np.zeros_like(trace.features)
    for h, g in logit_grads.items():
        W_h, _ = heads[h]
        gW, gb = g_heads[h]
        gW += g.T @ trace.features
        gb += g.sum(axis=0)
        d_feat += g @ W_h
    _backprop_trunk(trunk, g_trunk, trace, d_feat)
    return grad


def backprop_feature_grads(arch: ArchSpec, w: np.ndarray, trace: ForwardTrace,
                           d_feat: np.ndarray) -> np.ndarray:
    """Chain gradients given at the penultimate features back to weights."""
    trace = _as_batch(trace)
    trunk, _ = unpack(arch, w)
    grad = np.zeros(arch.param_count, dtype=np.float64)
    g_trunk, _ = unpack(arch, grad)
    _backprop_trunk(trunk, g_trunk, trace, np.atleast_2d(np.asarray(d_feat)))
    return grad


def _backprop_trunk(trunk, g_trunk, trace, d_post):
    for i in range(len(trunk) - 1, -1, -1):
        delta = d_post * (trace.pre[i] > 0.0)
        a_prev = trace.inputs if i == 0 else trace.post[i - 1]
        gW, gb = g_trunk[i]
        gW += delta.T @ a_prev
        gb += delta.sum(axis=0)
        if i > 0:
            d_post = delta @ trunk[i][0]


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def ce_from_logits(full_logits: np.ndarray, labels: np.ndarray,
                   num_classes: int | None = None):
    """Mean softmax cross-entropy and its gradient at the given logits.

    The returned gradient matches the full logit width; columns beyond
    num_classes (when given) stay zero.
    """
    labels = np.asarray(labels)
    logits = full_logits if num_classes is None else full_logits[:, :num_classes]
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels out of range [0, {c})")
    logp = logits - _logsumexp(logits)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    g /= n
    if c < full_logits.shape[1]:
        g = np.pad(g, ((0, 0), (0, full_logits.shape[1] - c)))
    return loss, g


def ce_loss_grad_batch(arch: ArchSpec, w: np.ndarray, X: np.ndarray,
                       labels: np.ndarray, head: int,
                       num_classes: int | None = None):
    """Mean softmax cross-entropy and its full weight gradient on a batch.

    labels index columns of the selected head's logits (local indices for a
    multi-head task, global class ids for the single head). num_classes
    restricts the softmax to the first columns, for when only the classes
    seen so far should compete.
    """
    trace = forward_batch(arch, w, X, head)
    loss, g = ce_from_logits(trace.head_logits[head], labels, num_classes)
    return loss, backprop_logit_grads(arch, w, trace, {head: g})


def backward_ce(arch: ArchSpec, w: np.ndarray, trace: ForwardTrace,
                label: int, num_classes: int | None = None) -> np.ndarray:
    """Gradient of single-sample softmax cross-entropy w.r.t. all weights.

    The trace must come from forward() on a concrete head (not ALL_HEADS);
    label indexes that head's logits.
    """
    if trace.head == ALL_HEADS:
        raise ValueError("cross-entropy needs a concrete head selection")
    head = trace.head
    logits = np.atleast_2d(trace.head_logits[head])
    c = logits.shape[1] if num_classes is None else num_classes
    if not 0 <= label < c:
        raise ValueError(f"label {label} outside active range [0, {c})")
    g = np.zeros_like(logits)
    g[:, :c] = np.exp(logits[:, :c] - _logsumexp(logits[:, :c]))
    g[:, label] -= 1.0
    return backprop_logit_grads(arch, w, trace, {head: g})


def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled softmax exp(o/tau) / sum exp(o/tau)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    o = np.asarray(logits, dtype=np.float64) / tau
    o = o - o.max(axis=-1, keepdims=True)
    e = np.exp(o)
    return e / e.sum(axis=-1, keepdims=True)


def center_normalize(features: np.ndarray) -> np.ndarray:
    """Subtract the mean then scale to unit L2 norm.

    A constant input has no direction left after centering; it maps to the
    zero vector and emits DegenerateFeatureWarning.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty feature vector")
    c = f - f.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    tiny = 1e-12 * max(1.0, float(np.abs(f).max()))
    if f.ndim == 1:
        if norm[0] <= tiny:
            warnings.warn("constant feature vector, returning zeros",
                          DegenerateFeatureWarning)
            return np.zeros_like(f)
        return c / norm
    out = np.zeros_like(c)
    ok = norm[:, 0] > tiny
    if not ok.all():
        warnings.warn("constant feature rows, returning zeros",
                      DegenerateFeatureWarning)
    out[ok] = c[ok] / norm[ok]
    return out


def center_normalize_vjp(features: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Pull a gradient at center_normalize(features) back to raw features.

    With c = features - mean and u = c / ||c||, the chain is
    (I - u u^T) / ||c|| followed by the centering projector. Degenerate
    rows get a zero gradient.
    """
    f = np.asarray(features, dtype=np.float64)
    g = np.asarray(g_out, dtype=np.float64)
    squeeze = f.ndim == 1
    if squeeze:
        f, g = f[None, :], g[None, :]
    c = f - f.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    tiny = 1e-12 * max(1.0, float(np.abs(f).max()) if f.size else 1.0)
    out = np.zeros_like(f)
    ok = norm[:, 0] > tiny
    if ok.any():
        u = c[ok] / norm[ok]
        gu = g[ok] - (g[ok] * u).sum(axis=-1, keepdims=True) * u
        gc = gu / norm[ok]
        out[ok] = gc - gc.mean(axis=-1, keepdims=True)
    return out[0] if squeeze else out


def sgd_step(w: np.ndarray, grad: np.ndarray,
             state: OptimState) -> tuple[np.ndarray, OptimState]:
    """Classical momentum: v <- m v + g; w <- w - lr v."""
    if w.shape != grad.shape or w.shape != state.velocity.shape:
        raise ValueError("weight / gradient / velocity lengths differ")
    v = state.momentum * state.velocity + grad
    return w - state.lr * v, OptimState(velocity=v, lr=state.lr,
                                        momentum=state.momentum)
