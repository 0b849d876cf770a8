"""Volume-preserving flat flow on Cartesian grids and nearly spherical sets."""

from .grid import (
    DistanceField,
    GridGeometry,
    GridSet,
    components,
    dissipation,
    hausdorff,
    perimeter,
    signed_distance,
)
from .step import StepConfig, StepResult, find_lambda, minimize_linear, solve_at_lambda, step

__all__ = [
    "DistanceField",
    "GridGeometry",
    "GridSet",
    "StepConfig",
    "StepResult",
    "components",
    "dissipation",
    "find_lambda",
    "hausdorff",
    "minimize_linear",
    "perimeter",
    "signed_distance",
    "solve_at_lambda",
    "step",
]
