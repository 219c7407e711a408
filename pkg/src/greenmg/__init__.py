"""Learning Green's functions with multilevel kernel integration."""

from ._backend import BACKEND
from .errors import (ArchitectureMismatch, CovarianceNotPD, DegenerateTarget, GreenMGError, InvalidConfig, InvalidCount,
                     LevelMismatch, NonDyadicGrid, NumericalBlowup, ShapeMismatch, SingularInput, SolveFailure,
                     UnsupportedDimension)
from .grid import GridHierarchy, build_hierarchy, interpolate, restrict
from .mlmi import (KernelPointSet, MlmiPlan, build_plan, dense_adjoint, dense_apply, enumerate_points, make_plan,
                   mlmi_adjoint, mlmi_apply, point_fraction)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GridHierarchy", "build_hierarchy", "interpolate", "restrict", "KernelPointSet", "MlmiPlan",
    "build_plan", "make_plan", "enumerate_points", "point_fraction", "mlmi_apply", "mlmi_adjoint", "dense_apply",
    "dense_adjoint", "GreenMGError", "NonDyadicGrid", "UnsupportedDimension", "LevelMismatch", "ShapeMismatch",
    "NumericalBlowup", "SingularInput", "CovarianceNotPD", "SolveFailure", "InvalidConfig", "InvalidCount", "DegenerateTarget",
    "ArchitectureMismatch",
]
