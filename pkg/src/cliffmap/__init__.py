"""Circular-linear flow field maps with online stochastic-EM updates."""

from .batch import BuildConfig, EmConfig, MeanShiftConfig, build_cell, em_fit, mean_shift_modes
from .dynamics_map import CliffMap, GridSpec, PositionedVelocity, VelocityBatch, build_map, load_map, save_map, update_map
from .online import CellState, SufficientStats, UpdateConfig, update_cell
from .planner import PlannerConfig, path_flow_alignment, plan
from .swgmm import Swgmm, Swnd, Velocity, mean_nll, mixture_density, swgmm_pdf, swnd_pdf

__all__ = [
    "BuildConfig",
    "CellState",
    "CliffMap",
    "EmConfig",
    "GridSpec",
    "MeanShiftConfig",
    "PlannerConfig",
    "PositionedVelocity",
    "SufficientStats",
    "Swgmm",
    "Swnd",
    "UpdateConfig",
    "Velocity",
    "VelocityBatch",
    "build_cell",
    "build_map",
    "em_fit",
    "load_map",
    "mean_nll",
    "mean_shift_modes",
    "mixture_density",
    "path_flow_alignment",
    "plan",
    "save_map",
    "swgmm_pdf",
    "swnd_pdf",
    "update_cell",
    "update_map",
]
