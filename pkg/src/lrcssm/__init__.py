"""Nonlinear recurrent state-space model with a diagonal-by-construction
Jacobian, solved in parallel over time by Newton iterations whose linear
solves are affine prefix scans."""

from .cell import (GateValues, LrcLayerParams, a_diag, b_vec, drift,
                   euler_step, gates, step_jacobian_diag)
from .data import Dataset, load_ts, save_ts, split, synth_task
from .errors import (ConfigurationError, LrcError, NumericError, ParseError,
                     UsageError, ValidationError)
from .model import (BlockParams, ModelConfig, ModelParams, block_forward,
                    forward, init_params, layer_norm)
from .backward import GradientSet, adjoint_reverse_scan, model_backward, step_backward
from .scan import AffineElement, affine_compose, prefix_scan_affine
from .solver import (Linearization, SolveReport, SolverConfig,
                     sequential_rollout, solve_parallel)
from .train import TrainConfig, adam_step, cross_entropy, grid_search, train

__version__ = "0.1.0"

__all__ = [
    "AffineElement", "BlockParams", "ConfigurationError", "Dataset",
    "GateValues", "GradientSet", "Linearization", "LrcError",
    "LrcLayerParams", "ModelConfig", "ModelParams", "NumericError",
    "ParseError", "SolveReport", "SolverConfig", "TrainConfig", "UsageError",
    "ValidationError", "a_diag", "adam_step", "adjoint_reverse_scan",
    "affine_compose", "b_vec", "block_forward", "cross_entropy", "drift",
    "euler_step", "forward", "gates", "grid_search", "init_params",
    "layer_norm", "load_ts", "model_backward", "prefix_scan_affine",
    "save_ts", "sequential_rollout", "solve_parallel", "split",
    "step_backward", "step_jacobian_diag", "synth_task", "train",
]
