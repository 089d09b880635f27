"""Inverse Hessian Regularization for continual learning on toy MLPs."""

from ihr.curvature import KronFactors, estimate_factors, ihvp, load_factors, merge_factor_sets, save_factors
from ihr.merge import MergeConfig, alpha_p, compute_alpha, merge_fta, merge_ihr
from ihr.model import ParamSet, backward, forward, init_params, loss
from ihr.tasks import TaskDataset, TaskStream, evaluate, make_stream

__version__ = "0.1.0"

__all__ = [
    "KronFactors",
    "MergeConfig",
    "ParamSet",
    "TaskDataset",
    "TaskStream",
    "alpha_p",
    "backward",
    "compute_alpha",
    "estimate_factors",
    "evaluate",
    "forward",
    "ihvp",
    "init_params",
    "load_factors",
    "loss",
    "make_stream",
    "merge_factor_sets",
    "merge_fta",
    "merge_ihr",
    "save_factors",
]
