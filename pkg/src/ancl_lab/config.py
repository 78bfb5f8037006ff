"""Experiment configuration: INI-style sections with documented defaults.

Every key is optional (defaults below); unknown sections or keys are
rejected so typos fail loudly. The resolved configuration can be written
back out as INI text; re-reading that echo reproduces the experiment
exactly.

Sections and defaults:

    [arch]     input_dim=8  hidden_dims=64,32  head_mode=multi
    [tasks]    source=blobs  tasks=5  classes_per_task=2
               samples_per_class=100  spread=0.25  csv_dir=
    [loss]     method=ewc  mode=cl  lambda=1.0  lambda_a=0.0  tau=2.0
    [train]    lr=0.1  lr_decay=3.0  patience=5  min_lr=0.0001
               momentum=0.9  batch_size=32  max_epochs=200  replay_m=
    [run]      seeds=0,1,2
    [analysis] enabled=false  task_index=1  lambda_a_grid=
               grid_extents=-0.5,1.5  grid_resolution=25
    [search]   lambda_grid=0.1,1,10,100  lambda_a_grid=0,0.1,1,10

An empty analysis lambda_a_grid means "auto" for the quadratic methods
(six points spread over the stable band implied by the importance maps;
see trainer.stable_lam_a_cap) and the fixed lambda scaled by
{0.1, 0.3, 1, 3, 10, 30} for the distillation methods. Empty replay_m
disables the exemplar buffer.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, replace

from .losses import LossSpec, Method, Mode
from .nn import ArchSpec
from .tasks import TaskSequence, load_sequence_csv, make_blob_sequence
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


_DEFAULTS: dict[str, dict[str, str]] = {
    "arch": {"input_dim": "8", "hidden_dims": "64,32", "head_mode": "multi"},
    "tasks": {"source": "blobs", "tasks": "5", "classes_per_task": "2",
              "samples_per_class": "100", "spread": "0.25", "csv_dir": ""},
    "loss": {"method": "ewc", "mode": "cl", "lambda": "1.0",
             "lambda_a": "0.0", "tau": "2.0"},
    "train": {"lr": "0.1", "lr_decay": "3.0", "patience": "5",
              "min_lr": "0.0001", "momentum": "0.9", "batch_size": "32",
              "max_epochs": "200", "replay_m": ""},
    "run": {"seeds": "0,1,2"},
    "analysis": {"enabled": "false", "task_index": "1", "lambda_a_grid": "",
                 "grid_extents": "-0.5,1.5", "grid_resolution": "25"},
    "search": {"lambda_grid": "0.1,1,10,100", "lambda_a_grid": "0,0.1,1,10"},
}

_LAMBDA_A_FACTORS = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0)


def _parse_list(text: str, cast):
    return [cast(tok.strip()) for tok in text.split(",") if tok.strip()]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    arch: ArchSpec
    task_source: str
    n_tasks: int
    classes_per_task: int
    samples_per_class: int
    spread: float
    csv_dir: str
    loss: LossSpec
    train_template: TrainConfig
    seeds: list[int]
    analysis_enabled: bool
    analysis_task: int
    analysis_lam_a_grid: list[float] | str
    grid_extents: tuple[float, float]
    grid_resolution: int
    search_lambda_grid: list[float]
    search_lambda_a_grid: list[float]

    def train_config(self, seed: int, loss: LossSpec | None = None) -> TrainConfig:
        return replace(self.train_template, seed=seed,
                       loss=self.loss if loss is None else loss)

    def sequence_for_seed(self, seed: int) -> TaskSequence:
        if self.task_source == "csv":
            return load_sequence_csv(self.csv_dir, self.n_tasks,
                                     self.classes_per_task)
        return make_blob_sequence(self.n_tasks, self.classes_per_task,
                                  self.samples_per_class, self.arch.input_dim,
                                  spread=self.spread, seed=seed)

    def to_ini_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["arch"] = {
            "input_dim": str(self.arch.input_dim),
            "hidden_dims": ",".join(map(str, self.arch.hidden_dims)),
            "head_mode": self.arch.head_mode,
        }
        cp["tasks"] = {
            "source": self.task_source,
            "tasks": str(self.n_tasks),
            "classes_per_task": str(self.classes_per_task),
            "samples_per_class": str(self.samples_per_class),
            "spread": repr(self.spread),
            "csv_dir": self.csv_dir,
        }
        cp["loss"] = {
            "method": self.loss.method.value,
            "mode": self.loss.mode.value,
            "lambda": repr(self.loss.lam),
            "lambda_a": repr(self.loss.lam_a),
            "tau": repr(self.loss.tau),
        }
        t = self.train_template
        cp["train"] = {
            "lr": repr(t.lr), "lr_decay": repr(t.lr_decay),
            "patience": str(t.patience), "min_lr": repr(t.min_lr),
            "momentum": repr(t.momentum), "batch_size": str(t.batch_size),
            "max_epochs": str(t.max_epochs),
            "replay_m": "" if t.replay_m is None else str(t.replay_m),
        }
        cp["run"] = {"seeds": ",".join(map(str, self.seeds))}
        cp["analysis"] = {
            "enabled": str(self.analysis_enabled).lower(),
            "task_index": str(self.analysis_task),
            "lambda_a_grid": (self.analysis_lam_a_grid
                              if isinstance(self.analysis_lam_a_grid, str) else
                              ",".join(repr(v) for v in self.analysis_lam_a_grid)),
            "grid_extents": f"{self.grid_extents[0]!r},{self.grid_extents[1]!r}",
            "grid_resolution": str(self.grid_resolution),
        }
        cp["search"] = {
            "lambda_grid": ",".join(repr(v) for v in self.search_lambda_grid),
            "lambda_a_grid": ",".join(repr(v) for v in self.search_lambda_a_grid),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc

    for section in cp.sections():
        if section not in _DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in _DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    def get(section, key):
        if cp.has_option(section, key):
            return cp.get(section, key)
        return _DEFAULTS[section][key]

    try:
        n_tasks = int(get("tasks", "tasks"))
        classes_per_task = int(get("tasks", "classes_per_task"))
        head_mode = get("arch", "head_mode")
        if head_mode == "multi":
            head_sizes = (classes_per_task,) * n_tasks
        elif head_mode == "single":
            head_sizes = (classes_per_task * n_tasks,)
        else:
            raise ConfigError(f"unknown head_mode {head_mode!r}")
        arch = ArchSpec(
            input_dim=int(get("arch", "input_dim")),
            hidden_dims=tuple(_parse_list(get("arch", "hidden_dims"), int)),
            head_sizes=head_sizes,
            head_mode=head_mode,
        )
        source = get("tasks", "source")
        if source not in ("blobs", "csv"):
            raise ConfigError(f"unknown task source {source!r}")
        csv_dir = get("tasks", "csv_dir")
        if source == "csv" and not csv_dir:
            raise ConfigError("csv source needs csv_dir")

        method = Method(get("loss", "method"))
        mode = Mode(get("loss", "mode"))
        lam = float(get("loss", "lambda"))
        lam_a = float(get("loss", "lambda_a"))
        loss = LossSpec(method, mode,
                        lam=0.0 if mode == Mode.FINETUNE else lam,
                        lam_a=lam_a if mode == Mode.ANCL else 0.0,
                        tau=float(get("loss", "tau")))

        replay_raw = get("train", "replay_m")
        train_template = TrainConfig(
            loss=loss,
            lr=float(get("train", "lr")),
            lr_decay=float(get("train", "lr_decay")),
            patience=int(get("train", "patience")),
            min_lr=float(get("train", "min_lr")),
            momentum=float(get("train", "momentum")),
            batch_size=int(get("train", "batch_size")),
            max_epochs=int(get("train", "max_epochs")),
            replay_m=int(replay_raw) if replay_raw.strip() else None,
        )
        seeds = _parse_list(get("run", "seeds"), int)
        if not seeds:
            raise ConfigError("need at least one seed")

        grid_raw = get("analysis", "lambda_a_grid").strip()
        if grid_raw == "auto" or (not grid_raw
                                  and method in (Method.EWC, Method.MAS)):
            lam_a_grid: list[float] | str = "auto"
        elif grid_raw:
            lam_a_grid = _parse_list(grid_raw, float)
        else:
            lam_a_grid = [lam * f for f in _LAMBDA_A_FACTORS]
        extents = _parse_list(get("analysis", "grid_extents"), float)
        if len(extents) != 2 or extents[0] >= extents[1]:
            raise ConfigError("grid_extents must be 'lo,hi' with lo < hi")
        analysis_task = int(get("analysis", "task_index"))
        if not 1 <= analysis_task < n_tasks:
            raise ConfigError("analysis task_index must be in [1, tasks)")

        cfg = ExperimentConfig(
            arch=arch,
            task_source=source,
            n_tasks=n_tasks,
            classes_per_task=classes_per_task,
            samples_per_class=int(get("tasks", "samples_per_class")),
            spread=float(get("tasks", "spread")),
            csv_dir=csv_dir,
            loss=loss,
            train_template=train_template,
            seeds=seeds,
            analysis_enabled=_parse_bool(get("analysis", "enabled")),
            analysis_task=analysis_task,
            analysis_lam_a_grid=lam_a_grid,
            grid_extents=(extents[0], extents[1]),
            grid_resolution=int(get("analysis", "grid_resolution")),
            search_lambda_grid=_parse_list(get("search", "lambda_grid"), float),
            search_lambda_a_grid=_parse_list(get("search", "lambda_a_grid"),
                                             float),
        )
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)
