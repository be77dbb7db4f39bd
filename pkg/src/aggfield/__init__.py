"""Continuous spatial surface reconstruction from point and area data."""

__version__ = "0.1.0"

from .mesh import TriMesh, FemMatrices, assemble_fem, build_regular_mesh, load_mesh, locate_point
from .spde import (
    SpdeParams,
    SparsePrecision,
    build_precision,
    matern_cov,
    params_to_theta,
    practical_range,
    sample_gmrf,
    theta_to_params,
)
from .project import (
    AreaPartition,
    PopulationGrid,
    Projector,
    area_projector,
    point_projector,
    stack_projectors,
)
from .gauss import GaussPriors, NormalObs, gaussian_fit, mse_mae, predict_surface
from .pois import (
    HmcConfig,
    PoissonAreaData,
    PoissonPriors,
    SampleSet,
    aggregate_relative_risk,
    fit_eb,
    fit_full_bayes,
    fit_hybrid,
    hmc_chain,
    laplace_log_marginal,
    sir,
)
from .icar import Adjacency, fit_icar, icar_log_prior

__all__ = [name for name in dir() if not name.startswith("_")]
