"""Stability-plasticity measurements on trained weight sets.

Three instruments: Euclidean weight distance to the frozen reference
networks (with the quadratic forgetting bound built on the top Hessian
eigenvalue), linear centered kernel alignment between layer activations,
and a 2-D accuracy/loss landscape spanned by three anchor weight vectors
with orthogonal-projection coordinates for any further vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tasks import TaskDataset, evaluate, mean_ce_loss


def weight_distance(w_a: np.ndarray, w_b: np.ndarray) -> float:
    """Euclidean distance between two flat weight vectors."""
    a, b = np.asarray(w_a), np.asarray(w_b)
    if a.shape != b.shape:
        raise ValueError("weight vectors have different lengths")
    return float(np.linalg.norm(a - b))


def forgetting_bound(w_a, w_b, lam_max: float) -> float:
    """Quadratic-expansion bound on loss growth: (1/2) lam_max ||a - b||^2."""
    d = weight_distance(w_a, w_b)
    return 0.5 * lam_max * d * d


def hessian_max_eigenvalue(grad_fn, w: np.ndarray, iters: int = 50,
                           eps: float = 1e-5, seed: int = 0) -> float:
    """Power-iteration estimate of the top Hessian eigenvalue.

    Hessian-vector products come from central differences of grad_fn, so
    only a gradient oracle is needed.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=w.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (grad_fn(w + eps * v) - grad_fn(w - eps * v)) / (2.0 * eps)
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0
        lam = float(v @ hv)
        v = hv / norm
    return lam


def cka_linear(R1: np.ndarray, R2: np.ndarray) -> float:
    """Linear centered kernel alignment between two activation matrices.

    Columns are centered over the N samples, then
    ||R2^T R1||_F^2 / (||R1^T R1||_F ||R2^T R2||_F).
    """
    A = np.asarray(R1, dtype=np.float64)
    B = np.asarray(R2, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or len(A) != len(B):
        raise ValueError("activation matrices must share the sample dimension")
    if len(A) < 2:
        raise ValueError("need at least two samples")
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    denom = np.linalg.norm(A.T @ A) * np.linalg.norm(B.T @ B)
    if denom == 0.0:
        raise ValueError("degenerate (constant) activations, alignment undefined")
    return float(np.linalg.norm(B.T @ A) ** 2 / denom)


def layer_activations(arch: nn.ArchSpec, w: np.ndarray,
                      X: np.ndarray) -> list[np.ndarray]:
    """Post-activation output of every hidden layer on the probe inputs."""
    return nn.forward_batch(arch, w, X).post


def cka_suite(arch, w_main, w_old, w_aux, w_multi, probe_inputs,
              layer_set=None) -> dict[str, float]:
    """Layer-averaged alignment of one network against three references."""
    X = np.asarray(probe_inputs, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty probe data")
    acts = {name: layer_activations(arch, wv, X)
            for name, wv in (("main", w_main), ("old", w_old),
                             ("aux", w_aux), ("multi", w_multi))}
    layers = range(len(arch.hidden_dims)) if layer_set is None else layer_set
    out = {}
    for ref in ("old", "aux", "multi"):
        scores = [cka_linear(acts["main"][l], acts[ref][l]) for l in layers]
        out[f"cka_{ref}"] = float(np.mean(scores))
    return out


def spearman(x, y) -> float:
    """Rank correlation (no tie correction; inputs are continuous here)."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length series")
    rx = np.argsort(np.argsort(x)).astype(np.float64)
    ry = np.argsort(np.argsort(y)).astype(np.float64)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


@dataclass
class LandscapeBasis:
    """Origin plus two orthogonalized direction vectors spanning the plane
    through three anchor weight vectors.

    In plane coordinates the anchors sit at (0, 0), (1, 0), and
    (anchor3_x, 1): the second direction was orthogonalized, so the third
    anchor keeps a component anchor3_x along u.
    """

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    anchor3_x: float = 0.0

    @property
    def u_norm_sq(self) -> float:
        return float(self.u @ self.u)

    @property
    def v_norm_sq(self) -> float:
        return float(self.v @ self.v)


def landscape_basis(w1, w2, w3) -> LandscapeBasis:
    """u = w2 - w1; v = (w3 - w1) orthogonalized against u."""
    w1, w2, w3 = (np.asarray(v, dtype=np.float64) for v in (w1, w2, w3))
    u = w2 - w1
    raw_v = w3 - w1
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise ValueError("w2 equals w1; no first direction")
    x3 = (u @ raw_v) / (nu * nu)
    v = raw_v - x3 * u
    if np.linalg.norm(v) <= 1e-12 * max(1.0, np.linalg.norm(raw_v)):
        raise ValueError("w3 - w1 is (near) parallel to w2 - w1; plane is degenerate")
    return LandscapeBasis(origin=w1.copy(), u=u, v=v, anchor3_x=float(x3))


def reconstruct(basis: LandscapeBasis, x: float, y: float) -> np.ndarray:
    """Weight vector at plane coordinates (x, y)."""
    return basis.origin + x * basis.u + y * basis.v


def project(w, basis: LandscapeBasis) -> tuple[float, float, float]:
    """Plane coordinates of w and the norm of the out-of-plane residual."""
    d = np.asarray(w, dtype=np.float64) - basis.origin
    x = float((d @ basis.u) / basis.u_norm_sq)
    y = float((d @ basis.v) / basis.v_norm_sq)
    residual = d - x * basis.u - y * basis.v
    return x, y, float(np.linalg.norm(residual))


@dataclass
class LandscapeGrid:
    xs: np.ndarray
    ys: np.ndarray
    mean_accuracy: np.ndarray
    mean_loss: np.ndarray
    projections: dict[str, tuple[float, float, float]] = field(default_factory=dict)


def grid_eval(arch, basis: LandscapeBasis, extents, resolution,
              datasets: list[TaskDataset], points: dict | None = None,
              single_head_classes: int | None = None) -> LandscapeGrid:
    """Mean accuracy and mean cross-entropy over the tasks' datasets at
    every grid cell of the plane; optionally project named weight vectors.

    extents is ((x_lo, x_hi), (y_lo, y_hi)); resolution is cells per axis
    (one value or a pair). Extents grow automatically so the three anchor
    points always sit inside with margin.
    """
    (x_lo, x_hi), (y_lo, y_hi) = extents
    try:
        res_x, res_y = resolution
    except TypeError:
        res_x = res_y = resolution
    if res_x < 2 or res_y < 2:
        raise ValueError("resolution must be at least 2 per axis")
    margin = 0.25
    x_lo = min(x_lo, 0.0 - margin, basis.anchor3_x - margin)
    x_hi = max(x_hi, 1.0 + margin, basis.anchor3_x + margin)
    y_lo = min(y_lo, 0.0 - margin)
    y_hi = max(y_hi, 1.0 + margin)
    xs = np.linspace(x_lo, x_hi, res_x)
    ys = np.linspace(y_lo, y_hi, res_y)
    acc = np.empty((res_y, res_x))
    loss = np.empty((res_y, res_x))
    for iy, yv in enumerate(ys):
        for ix, xv in enumerate(xs):
            wv = reconstruct(basis, xv, yv)
            a_sum = l_sum = 0.0
            for ds in datasets:
                a_sum += evaluate(arch, wv, ds, num_classes=single_head_classes)
                l_sum += mean_ce_loss(arch, wv, ds,
                                      num_classes=single_head_classes)
            acc[iy, ix] = a_sum / len(datasets)
            loss[iy, ix] = l_sum / len(datasets)
    projections = {}
    if points:
        projections = {name: project(wv, basis) for name, wv in points.items()}
    return LandscapeGrid(xs=xs, ys=ys, mean_accuracy=acc, mean_loss=loss,
                         projections=projections)
