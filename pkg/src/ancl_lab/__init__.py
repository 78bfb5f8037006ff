"""Desk-scale continual-learning testbed.

A hand-rolled MLP stack for studying how a second regularizer toward a
current-task-only "auxiliary" network shifts the stability-plasticity
balance of classic weight-regularization and distillation methods, plus
the analysis and verification tooling around it.
"""

from .analysis import (LandscapeBasis, LandscapeGrid, cka_linear, cka_suite,
                       forgetting_bound, grid_eval, landscape_basis, project,
                       spearman, weight_distance)
from .checkpoint import (Checkpoint, CheckpointStore, MissingCheckpointError,
                         load_checkpoint, save_checkpoint)
from .config import ConfigError, ExperimentConfig, parse_config
from .importance import ImportanceMap, accumulate, fisher_diag, mas_importance
from .losses import (LossSpec, Method, Mode, lfl_penalty, lwf_kd,
                     quad_penalty, total_loss)
from .nn import (ALL_HEADS, ArchSpec, ForwardTrace, OptimState, backward_ce,
                 center_normalize, forward, forward_batch, init_weights,
                 sgd_step, softmax_temp)
from .oracle import (QuadDynSpec, closed_form_iterate, fd_gradcheck,
                     fixed_point, run_all_checks, simulate_updates,
                     verify_gradient_identities)
from .replay import MemoryBuffer, combine, herding_select, nme_classify
from .tasks import (TaskDataset, TaskSequence, aac, aiac, evaluate,
                    load_csv, make_blob_sequence, save_csv)
from .trainer import (AnalysisBundle, RunRecord, TrainConfig,
                      TrainingDivergedError, analysis_regime, grid_search,
                      run_sequence, stability_guard, stable_lam_a_cap,
                      train_joint, train_plain)

__version__ = "0.1.0"
