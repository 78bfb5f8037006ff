"""Batch front-end: run experiment configurations, derive the analysis
artifacts, verify the numerical identities, and search hyperparameters.

Subcommands and exit codes:

    run         execute the configured sequences; write per-seed
                record.json + accuracy_matrix.csv, the resolved config
                echo, aggregate.json, and (when analysis is enabled)
                per-seed analysis bundles
    analyze     read the bundles and emit wd_cka.csv, landscape.csv and
                projection.csv per seed plus the seed-averaged wd_cka.csv
    verify      run the numerical verification battery
    gridsearch  two-phase hyperparameter search scored on validation AAC

    0 success | 2 configuration | 3 training diverged | 4 missing inputs
    | 5 verification failure

ANCL_LAB_THREADS caps how many seeds run concurrently (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis as an
from . import oracle, trainer
from .checkpoint import MissingCheckpointError
from .config import ConfigError, ExperimentConfig, parse_config
from .tasks import concat_datasets

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_MISSING = 4
EXIT_VERIFY = 5

_WD_CKA_HEADER = "lambda_a,wd_old,wd_aux,cka_old,cka_aux,cka_multi"


def _write_text(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _thread_count() -> int:
    raw = os.environ.get("ANCL_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_jobs(fn, items):
    workers = min(_thread_count(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _say(quiet: bool, *parts):
    if not quiet:
        print(*parts)


def _matrix_csv(matrix: np.ndarray) -> str:
    T = matrix.shape[0]
    lines = [",".join(f"acc_task_{k}" for k in range(T))]
    for row in matrix:
        lines.append(",".join("" if np.isnan(v) else repr(float(v))
                              for v in row))
    return "\n".join(lines) + "\n"


def _record_json(record: trainer.RunRecord, seed: int) -> str:
    matrix = [[None if np.isnan(v) else float(v) for v in row]
              for row in record.accuracy_matrix]
    payload = {
        "seed": seed,
        "config_hash": record.config_hash,
        "accuracy_matrix": matrix,
        "aac": record.aac,
        "aiac": float(np.mean(record.phase_accuracies)),
        "phase_accuracies": record.phase_accuracies,
        "final_losses": record.final_losses,
        "val_losses": [h.val_losses for h in record.val_history],
        "val_accuracies": [h.val_accuracies for h in record.val_history],
        "lrs": [h.lrs for h in record.val_history],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _run_one_seed(cfg: ExperimentConfig, seed: int, out_dir: str,
                  quiet: bool) -> float:
    seq = cfg.sequence_for_seed(seed)
    record = trainer.run_sequence(cfg.arch, seq, cfg.train_config(seed))
    seed_dir = os.path.join(out_dir, f"seed{seed}")
    os.makedirs(seed_dir, exist_ok=True)
    _write_text(os.path.join(seed_dir, "record.json"),
                _record_json(record, seed))
    _write_text(os.path.join(seed_dir, "accuracy_matrix.csv"),
                _matrix_csv(record.accuracy_matrix))
    if cfg.analysis_enabled:
        bundle = trainer.analysis_regime(cfg.arch, seq, cfg.analysis_task,
                                         cfg.train_config(seed),
                                         cfg.analysis_lam_a_grid)
        trainer.save_bundle(os.path.join(seed_dir, "analysis.npz"),
                            cfg.arch, bundle)
    _say(quiet, f"seed {seed}: AAC = {record.aac:.4f}")
    return record.aac


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    seeds = args.seeds if args.seeds else cfg.seeds
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "config.ini"), cfg.to_ini_text())
    aacs = _map_jobs(lambda s: _run_one_seed(cfg, s, args.out, args.quiet),
                     seeds)
    aggregate = {
        "seeds": seeds,
        "aac_mean": float(np.mean(aacs)),
        "aac_stderr": (float(np.std(aacs, ddof=1) / np.sqrt(len(aacs)))
                       if len(aacs) > 1 else 0.0),
        "aac_per_seed": {str(s): float(a) for s, a in zip(seeds, aacs)},
    }
    _write_text(os.path.join(args.out, "aggregate.json"),
                json.dumps(aggregate, indent=2, sort_keys=True) + "\n")
    _say(args.quiet, f"mean AAC {aggregate['aac_mean']:.4f} "
                     f"± {aggregate['aac_stderr']:.4f}")
    return EXIT_OK


def _wd_cka_rows(arch, bundle, probe_inputs) -> list[list[float]]:
    rows = []
    for lam_a in bundle.lam_a_grid:
        w = bundle.w_ancl[lam_a]
        scores = an.cka_suite(arch, w, bundle.w_old, bundle.w_aux,
                              bundle.w_multi, probe_inputs)
        rows.append([lam_a,
                     an.weight_distance(w, bundle.w_old),
                     an.weight_distance(w, bundle.w_aux),
                     scores["cka_old"], scores["cka_aux"],
                     scores["cka_multi"]])
    return rows


def _csv_text(header: str, rows) -> str:
    lines = [header]
    for row in rows:
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _analyze_one_seed(cfg: ExperimentConfig, seed: int, out_dir: str,
                      quiet: bool):
    seed_dir = os.path.join(out_dir, f"seed{seed}")
    bundle_path = os.path.join(seed_dir, "analysis.npz")
    if not os.path.exists(bundle_path):
        raise MissingCheckpointError(
            f"no analysis bundle at {bundle_path}; run with analysis enabled")
    arch, bundle = trainer.load_bundle(bundle_path)
    seq = cfg.sequence_for_seed(bundle.seed)
    t = bundle.task_index
    tests = [seq.tasks[k].test for k in range(t + 1)]
    probe = concat_datasets(tests).inputs
    single_classes = (seq.classes_seen(t) if arch.head_mode == "single"
                      else None)

    rows = _wd_cka_rows(arch, bundle, probe)
    _write_text(os.path.join(seed_dir, "wd_cka.csv"),
                _csv_text(_WD_CKA_HEADER, rows))

    basis = an.landscape_basis(bundle.w_old, bundle.w_aux, bundle.w_multi)
    points = {"old": bundle.w_old, "aux": bundle.w_aux,
              "multi": bundle.w_multi, "cl": bundle.w_cl}
    for lam_a in bundle.lam_a_grid:
        points[f"ancl_lam_a={lam_a:g}"] = bundle.w_ancl[lam_a]
    grid = an.grid_eval(arch, basis,
                        (cfg.grid_extents, cfg.grid_extents),
                        cfg.grid_resolution, tests, points=points,
                        single_head_classes=single_classes)
    land_rows = []
    for iy, y in enumerate(grid.ys):
        for ix, x in enumerate(grid.xs):
            land_rows.append([x, y, grid.mean_accuracy[iy, ix],
                              grid.mean_loss[iy, ix]])
    _write_text(os.path.join(seed_dir, "landscape.csv"),
                _csv_text("x,y,mean_accuracy,mean_loss", land_rows))
    proj_lines = ["label,x,y,residual_norm"]
    for label, (x, y, res) in grid.projections.items():
        proj_lines.append(f"{label},{x!r},{y!r},{res!r}")
    _write_text(os.path.join(seed_dir, "projection.csv"),
                "\n".join(proj_lines) + "\n")
    _say(quiet, f"seed {seed}: analysis artifacts written to {seed_dir}")
    return np.array(rows)


def _cmd_analyze(args) -> int:
    cfg = parse_config(args.config)
    seeds = args.seeds if args.seeds else cfg.seeds
    per_seed = _map_jobs(
        lambda s: _analyze_one_seed(cfg, s, args.out, args.quiet), seeds)
    mean_rows = np.mean(np.stack(per_seed), axis=0)
    _write_text(os.path.join(args.out, "wd_cka.csv"),
                _csv_text(_WD_CKA_HEADER, mean_rows))
    return EXIT_OK


def _cmd_verify(args) -> int:
    results = oracle.run_all_checks(seed=args.seed)
    if not args.quiet:
        print(oracle.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def _cmd_gridsearch(args) -> int:
    cfg = parse_config(args.config)
    seeds = args.seeds if args.seeds else cfg.seeds
    sequences = {s: cfg.sequence_for_seed(s) for s in seeds}
    result = trainer.grid_search(cfg.arch, sequences,
                                 cfg.train_config(seeds[0]),
                                 cfg.search_lambda_grid,
                                 cfg.search_lambda_a_grid)
    os.makedirs(args.out, exist_ok=True)
    payload = {
        "best_lambda": result.best_lam,
        "best_lambda_a": result.best_lam_a,
        "cl_val_aac": {repr(k): v for k, v in result.cl_scores.items()},
        "ancl_val_aac": {repr(k): v for k, v in result.ancl_scores.items()},
    }
    _write_text(os.path.join(args.out, "gridsearch.json"),
                json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _say(args.quiet, f"best lambda {result.best_lam:g}, "
                     f"best lambda_a {result.best_lam_a:g}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ancl-lab",
        description="continual-learning testbed with auxiliary-network "
                    "regularization and stability-plasticity analyses")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True, needs_out=True):
        if needs_config:
            p.add_argument("--config", required=True, help="INI config path")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")],
                       default=None, help="comma-separated seed override")
        p.add_argument("--quiet", action="store_true")

    common(sub.add_parser("run", help="execute the configured sequences"))
    common(sub.add_parser("analyze", help="emit WD/CKA/landscape artifacts"))
    p_verify = sub.add_parser("verify", help="run the numerical checks")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--quiet", action="store_true")
    common(sub.add_parser("gridsearch", help="two-phase hyperparameter search"))
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "analyze": _cmd_analyze,
                "verify": _cmd_verify, "gridsearch": _cmd_gridsearch}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (MissingCheckpointError, FileNotFoundError) as exc:
        print(f"missing inputs: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
