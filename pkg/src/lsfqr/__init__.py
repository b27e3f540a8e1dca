"""Locally sparse simultaneous functional quantile regression.

Slope surfaces ``beta(t, u)`` are bivariate splines on a triangulation of
``[0, T] x U``; an adaptive group penalty over triangles produces exact
null regions.
"""

from .bernstein import BernsteinBasis, null_space
from .design import (
    DesignBundle,
    FunctionalDataset,
    ModelSetup,
    QuantileGrid,
    SplineSpace,
    assemble_design,
    load_dataset,
)
from .errors import ConfigError, ConvergenceError, DataError, DomainError, LsfqrError
from .mesh import Triangulation, build_rect_triangulation
from .penalties import build_penalties, roughness_matrix
from .solver import (
    FitResult,
    Option,
    SolverSettings,
    adaptive_weights,
    check_loss,
    fit_initial,
    fit_sparse,
    refit_active,
)
from .tuning import TuningPlan, cv_initial, cv_sparse, kfold_split, tune

__version__ = "0.1.0"
