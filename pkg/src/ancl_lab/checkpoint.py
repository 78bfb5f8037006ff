"""Frozen-network bookkeeping and a versioned on-disk container.

The in-memory CheckpointStore holds the frozen reference weights used by
the regularizers (previous continual solution, current-task auxiliary
solution), their importance maps, per-task snapshots, and the replay
buffer. Stored arrays are marked read-only so later tasks cannot mutate
them in place.

The file container is a NumPy .npz archive: a ``meta`` entry holds a JSON
header (format version, architecture fields, importance metadata, buffer
class ids) and each weight vector / importance map / buffer class is a
named float64 array (``w_<name>``, ``imp_<name>``, ``buf_x<class>``,
``buf_f<class>``). float64 round-trips exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .importance import ImportanceMap
from .nn import ArchSpec
from .replay import MemoryBuffer

FORMAT_VERSION = 1


class MissingCheckpointError(LookupError):
    """A required frozen network or importance map is not in the store."""


def _frozen(w: np.ndarray) -> np.ndarray:
    out = np.array(w, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass
class CheckpointStore:
    """Reference weights and importances available while training a task."""

    old_weights: np.ndarray | None = None
    aux_weights: np.ndarray | None = None
    old_importance: ImportanceMap | None = None
    aux_importance: ImportanceMap | None = None
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    buffer: MemoryBuffer | None = None

    def freeze_old(self, w: np.ndarray, task_id: int):
        """Save the continual solution after task_id as the old network."""
        self.old_weights = _frozen(w)
        self.snapshots[task_id] = self.old_weights

    def freeze_aux(self, w: np.ndarray):
        self.aux_weights = _frozen(w)

    def require_old(self) -> np.ndarray:
        if self.old_weights is None:
            raise MissingCheckpointError("old network weights are not stored")
        return self.old_weights

    def require_aux(self) -> np.ndarray:
        if self.aux_weights is None:
            raise MissingCheckpointError("auxiliary network weights are not stored")
        return self.aux_weights

    def require_old_importance(self) -> ImportanceMap:
        if self.old_importance is None:
            raise MissingCheckpointError("old importance map is not stored")
        return self.old_importance

    def require_aux_importance(self) -> ImportanceMap:
        if self.aux_importance is None:
            raise MissingCheckpointError("auxiliary importance map is not stored")
        return self.aux_importance


@dataclass
class Checkpoint:
    """Contents of one container file."""

    arch: ArchSpec
    weights: dict[str, np.ndarray]
    importances: dict[str, ImportanceMap]
    buffer: MemoryBuffer | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str, arch: ArchSpec, weights: dict[str, np.ndarray],
                    importances: dict[str, ImportanceMap] | None = None,
                    buffer: MemoryBuffer | None = None,
                    extra: dict | None = None):
    importances = importances or {}
    meta = {
        "version": FORMAT_VERSION,
        "arch": {
            "input_dim": arch.input_dim,
            "hidden_dims": list(arch.hidden_dims),
            "head_sizes": list(arch.head_sizes),
            "head_mode": arch.head_mode,
        },
        "weights": sorted(weights),
        "importances": {
            name: {"source": imp.source, "tasks_covered": imp.tasks_covered}
            for name, imp in importances.items()
        },
        "buffer": None if buffer is None else {
            "m": buffer.m,
            "classes": buffer.classes,
            "cached": sorted(buffer.feature_cache),
        },
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, w in weights.items():
        arrays[f"w_{name}"] = np.asarray(w, dtype=np.float64)
    for name, imp in importances.items():
        arrays[f"imp_{name}"] = imp.values
    if buffer is not None:
        for c in buffer.classes:
            arrays[f"buf_x{c}"] = buffer.exemplars[c]
            if c in buffer.feature_cache:
                arrays[f"buf_f{c}"] = buffer.feature_cache[c]
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> Checkpoint:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        a = meta["arch"]
        arch = ArchSpec(a["input_dim"], tuple(a["hidden_dims"]),
                        tuple(a["head_sizes"]), a["head_mode"])
        weights = {name: data[f"w_{name}"] for name in meta["weights"]}
        importances = {
            name: ImportanceMap(data[f"imp_{name}"], info["source"],
                                info["tasks_covered"])
            for name, info in meta["importances"].items()
        }
        buffer = None
        if meta["buffer"] is not None:
            buffer = MemoryBuffer(m=meta["buffer"]["m"])
            for c in meta["buffer"]["classes"]:
                feats = data[f"buf_f{c}"] if c in meta["buffer"]["cached"] else None
                buffer.add_class(c, data[f"buf_x{c}"], feats)
    return Checkpoint(arch, weights, importances, buffer, meta["extra"])
