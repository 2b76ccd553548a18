"""Constrained sampling for score-based diffusion models.

Subpackages cover the variance-exploding diffusion process, a small
self-differentiating denoiser network, constraint functions, toy and PDE
data generation, denoiser-aware projection, the samplers themselves,
ground-truth oracles, distribution metrics, and an experiment CLI.
"""

from .errors import (
    BlowUpError,
    FormatError,
    MetricError,
    OracleExhaustedError,
    ProjectionError,
    SolverError,
    TrainingDivergedError,
)

__all__ = [
    "BlowUpError",
    "FormatError",
    "MetricError",
    "OracleExhaustedError",
    "ProjectionError",
    "SolverError",
    "TrainingDivergedError",
]

__version__ = "0.1.0"
