"""Mixed-model fitting and prediction for genotype-environment trials."""

from .data_model import (
    CovariateHistory,
    CovariateMatrix,
    MetDataset,
    PlotRecord,
    fit_stage_one,
    load_covariates,
    load_dataset,
    load_history,
    load_manifest,
    load_plots,
    prune_covariates,
    standardize,
)
from .errors import ConfigError, FitError, GxemixError, StageOneError, ValidationError
from .reml import FittedModel, ModelSpec, TermConfig, aic, c_inverse_blocks, fit
from .structures import (
    BaselineParams,
    KinshipParams,
    ReducedRankParams,
    StructureSpec,
    UnstructuredParams,
    build_omega,
    kinship_matrix,
)

__version__ = "0.1.0"
